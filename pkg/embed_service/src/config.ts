import { readFileSync } from "node:fs";

import { DEFAULT_MODELS, type EncoderSpec } from "./encoder.js";

export interface ServiceConfig {
  port: number;
  models: EncoderSpec[];
}

/**
 * Startup config: port from EMBED_PORT (default 8601), encoder specs from
 * the JSON file named by EMBED_MODELS (id/dimension/seed records), falling
 * back to the built-in model list.
 */
export function loadConfig(env: NodeJS.ProcessEnv = process.env): ServiceConfig {
  const port = Number(env.EMBED_PORT ?? 8601);
  if (!Number.isInteger(port) || port < 0 || port > 65535) {
    throw new Error(`invalid EMBED_PORT: ${env.EMBED_PORT}`);
  }
  let models = DEFAULT_MODELS;
  if (env.EMBED_MODELS) {
    const raw = JSON.parse(readFileSync(env.EMBED_MODELS, "utf-8")) as EncoderSpec[];
    if (!Array.isArray(raw) || raw.length === 0) {
      throw new Error("EMBED_MODELS file must hold a non-empty array of encoder specs");
    }
    models = raw.map((spec) => ({
      id: String(spec.id),
      dimension: Number(spec.dimension),
      seed: Number(spec.seed ?? 0),
    }));
  }
  return { port, models };
}
