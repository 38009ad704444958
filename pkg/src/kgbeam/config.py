"""Run configuration: one declarative YAML file, env interpolation, overrides.

Secrets never live in the file; ``${VAR}`` spans interpolate from the
environment at load time and missing variables are a config error.  Every
value can be overridden on the command line with ``--set dotted.key=value``.
``build_components`` turns a validated config into live backends.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .embedding import HashingEmbedder, HttpEmbeddingClient
from .errors import ConfigError
from .kg import InMemoryKG, SparqlKG
from .llm import GenerationParams, OpenAIChatGateway, ScriptedGateway
from .mockllm import HeuristicChatModel
from .pruning import BM25Pruner, DensePruner, LMPruner, OraclePruner, PrunerPair, RandomPruner
from .traversal import TraversalConfig

_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")

DEFAULTS: dict = {
    "kg": {
        "backend": "tsv",
        "path": None,
        "endpoint": None,
        "include_incoming": True,
        "timeout": 15.0,
        "retries": 2,
        "max_in_flight": 4,
    },
    "chat": {
        "endpoint": "mock://heuristic",
        "model": "heuristic",
        "api_key_env": "OPENAI_API_KEY",
        "temperature": 0.0,
        "temperature_by_purpose": {},
        "max_tokens": 256,
        "retries": 2,
        "timeout": 60.0,
        "prompt_mode": "constrained",  # constrained | unconstrained
    },
    "embedding": {"endpoint": "hash://256", "model": "hash", "normalize": False},
    "pruner": {
        "strategy": "bm25",  # lm | bm25 | dense | oracle | random
        "k1": 1.5,
        "b": 0.75,
        "relation_render": "full",
        "score_with_path_context": False,
        "fallback": "uniform",
        "oracle_path": None,
        "seed": 0,
    },
    "traversal": {
        "beam_width": 3,
        "max_depth": 3,
        "relation_k": 3,
        "entity_k": 3,
        "sufficiency_check": True,
        "entity_candidate_cap": 200,
        "answer_extraction": "braces",
        "topic_extract_fallback": False,
    },
    "dataset": {"path": None, "kind": "cwq"},
    "evaluation": {"em_normalization": "full"},
    "output_dir": "out",
    "jobs": 1,
    "cot_mode": False,
    "seed": 0,
}


def _interpolate(value):
    if isinstance(value, str):
        def sub(match):
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"environment variable {name} is not set")
            return os.environ[name]

        return _ENV_RE.sub(sub, value)
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    return value


def _deep_update(base: dict, overlay: dict) -> dict:
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _coerce(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like dotted.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        target = config
        for key in keys[:-1]:
            nxt = target.get(key)
            if not isinstance(nxt, dict):
                nxt = {}
                target[key] = nxt
            target = nxt
        target[keys[-1]] = _coerce(raw)
    return config


@dataclass
class RunConfig:
    """Resolved run settings; ``raw`` is the snapshot written next to traces."""

    raw: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] | None = None) -> "RunConfig":
        merged = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    data = yaml.safe_load(fh) or {}
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {path}") from exc
            except yaml.YAMLError as exc:
                raise ConfigError(f"config file is not valid YAML: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError("config file must contain a mapping")
            _deep_update(merged, data)
        if overrides:
            apply_overrides(merged, overrides)
        merged = _interpolate(merged)
        cfg = cls(raw=merged)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.raw[key]

    def validate(self) -> None:
        kg = self.raw.get("kg", {})
        has_path = bool(kg.get("path"))
        has_endpoint = bool(kg.get("endpoint"))
        if has_path == has_endpoint:
            raise ConfigError("exactly one of kg.path and kg.endpoint must be configured")
        strategy = self.raw["pruner"]["strategy"]
        if strategy not in ("lm", "bm25", "dense", "oracle", "random"):
            raise ConfigError(f"unknown pruner strategy: {strategy!r}")
        if strategy == "oracle" and not self.raw["pruner"].get("oracle_path"):
            raise ConfigError("pruner.oracle_path is required for the oracle strategy")
        chat = self.raw["chat"]
        # The gateway serves sufficiency/answer calls in every run, so a
        # remote endpoint without credentials fails before any traversal.
        endpoint = str(chat.get("endpoint", ""))
        if endpoint.startswith(("http://", "https://")):
            key_env = chat.get("api_key_env") or "OPENAI_API_KEY"
            if not os.environ.get(key_env):
                raise ConfigError(f"chat endpoint requires API key in ${key_env}")
        mode = chat.get("prompt_mode", "constrained")
        if mode not in ("constrained", "unconstrained"):
            raise ConfigError(f"unknown prompt mode: {mode!r}")
        trav = self.raw["traversal"]
        for name in ("beam_width", "max_depth", "relation_k", "entity_k"):
            if int(trav[name]) < 1:
                raise ConfigError(f"traversal.{name} must be >= 1")

    def snapshot(self) -> dict:
        return copy.deepcopy(self.raw)

    def config_hash(self) -> str:
        canonical = json.dumps(self.snapshot(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    # -- factories

    def build_kg(self):
        kg_cfg = self.raw["kg"]
        if kg_cfg.get("endpoint"):
            return SparqlKG(
                kg_cfg["endpoint"],
                timeout=float(kg_cfg.get("timeout", 15.0)),
                retries=int(kg_cfg.get("retries", 2)),
                max_in_flight=int(kg_cfg.get("max_in_flight", 4)),
            )
        store = InMemoryKG()
        fmt = "tsv" if kg_cfg.get("backend", "tsv") == "tsv" else "ntriples-subset"
        store.load_triples(kg_cfg["path"], format=fmt)
        return store

    def build_gateway(self):
        chat = self.raw["chat"]
        params = GenerationParams(
            model=str(chat["model"]),
            temperature=float(chat["temperature"]),
            max_tokens=int(chat["max_tokens"]),
        )
        by_purpose = {k: float(v) for k, v in (chat.get("temperature_by_purpose") or {}).items()}
        endpoint = str(chat["endpoint"])
        if endpoint.startswith("mock://"):
            return ScriptedGateway(HeuristicChatModel(), params=params)
        return OpenAIChatGateway(
            endpoint,
            params,
            api_key_env=chat.get("api_key_env") or "OPENAI_API_KEY",
            retries=int(chat.get("retries", 2)),
            timeout=float(chat.get("timeout", 60.0)),
            temperature_by_purpose=by_purpose,
        )

    def build_embedder(self):
        emb = self.raw["embedding"]
        endpoint = str(emb["endpoint"])
        if endpoint.startswith("hash://"):
            dim = int(endpoint[len("hash://"):] or 256)
            return HashingEmbedder(dim=dim, seed=int(self.raw.get("seed", 0)))
        return HttpEmbeddingClient(endpoint, model=str(emb["model"]), normalize=bool(emb.get("normalize", False)))

    def build_pruners(self, gateway=None) -> PrunerPair:
        cfg = self.raw["pruner"]
        strategy = cfg["strategy"]
        if strategy == "bm25":
            pruner = BM25Pruner(k1=float(cfg["k1"]), b=float(cfg["b"]))
        elif strategy == "dense":
            pruner = DensePruner(self.build_embedder())
        elif strategy == "lm":
            if gateway is None:
                gateway = self.build_gateway()
            pruner = LMPruner(
                gateway,
                constrained=self.raw["chat"]["prompt_mode"] == "constrained",
                fallback=cfg.get("fallback", "uniform"),
            )
        elif strategy == "oracle":
            with open(cfg["oracle_path"], encoding="utf-8") as fh:
                gold = json.load(fh)
            pruner = OraclePruner(gold)
        elif strategy == "random":
            pruner = RandomPruner(seed=int(cfg.get("seed", 0)))
        else:  # pragma: no cover - validate() rejects earlier
            raise ConfigError(f"unknown pruner strategy: {strategy!r}")
        return PrunerPair.of(pruner)

    def build_traversal_config(self) -> TraversalConfig:
        trav = self.raw["traversal"]
        return TraversalConfig(
            beam_width=int(trav["beam_width"]),
            max_depth=int(trav["max_depth"]),
            relation_k=int(trav["relation_k"]),
            entity_k=int(trav["entity_k"]),
            sufficiency_check=bool(trav["sufficiency_check"]),
            include_incoming=bool(self.raw["kg"].get("include_incoming", True)),
            entity_candidate_cap=int(trav["entity_candidate_cap"]),
            score_with_path_context=bool(self.raw["pruner"].get("score_with_path_context", False)),
            relation_render=str(self.raw["pruner"].get("relation_render", "full")),
            answer_extraction=str(trav.get("answer_extraction", "braces")),
            topic_extract_fallback=bool(trav.get("topic_extract_fallback", False)),
        )
