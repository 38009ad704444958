/**
 * Deterministic text encoders.
 *
 * Each encoder maps a text to a fixed-dimension vector via a hashed bag of
 * words: every token lands on one signed coordinate chosen by a 64-bit
 * FNV-1a digest keyed with the model seed. The same (model, text) pair
 * yields the same vector in every process, so golden fixtures survive
 * restarts. Vectors are raw counts by default; L2 normalization is applied
 * only when a request asks for it.
 */

const FNV_OFFSET = 0xcbf29ce484222325n;
const FNV_PRIME = 0x100000001b3n;
const MASK64 = (1n << 64n) - 1n;

export function tokenize(text: string): string[] {
  return text.toLowerCase().match(/[a-z0-9]+/g) ?? [];
}

function fnv1a64(data: string): bigint {
  let hash = FNV_OFFSET;
  for (const byte of Buffer.from(data, "utf-8")) {
    hash ^= BigInt(byte);
    hash = (hash * FNV_PRIME) & MASK64;
  }
  return hash;
}

export interface EncoderSpec {
  id: string;
  dimension: number;
  seed: number;
}

export class HashedBagEncoder {
  constructor(readonly spec: EncoderSpec) {
    if (spec.dimension < 2) {
      throw new Error(`encoder ${spec.id}: dimension must be >= 2`);
    }
  }

  get id(): string {
    return this.spec.id;
  }

  get dimension(): number {
    return this.spec.dimension;
  }

  encode(text: string, normalize: boolean): number[] {
    const vec = new Float64Array(this.spec.dimension);
    for (const token of tokenize(text)) {
      const digest = fnv1a64(`${this.spec.seed}:${token}`);
      const index = Number(digest % BigInt(this.spec.dimension));
      const sign = (digest >> 63n) & 1n ? 1 : -1;
      vec[index] += sign;
    }
    if (normalize) {
      let sum = 0;
      for (const x of vec) sum += x * x;
      const norm = Math.sqrt(sum);
      if (norm > 0) {
        for (let i = 0; i < vec.length; i++) vec[i] /= norm;
      }
    }
    return Array.from(vec);
  }

  encodeBatch(texts: string[], normalize: boolean): number[][] {
    return texts.map((text) => this.encode(text, normalize));
  }
}

/**
 * Two encoder families ship by default: a 384-dimension one in the
 * SentenceBERT size class and a 768-dimension one in the GTR size class.
 */
export const DEFAULT_MODELS: EncoderSpec[] = [
  { id: "sentencebert-hash-384", dimension: 384, seed: 17 },
  { id: "gtr-hash-768", dimension: 768, seed: 29 },
];

export class EncoderRegistry {
  private encoders = new Map<string, HashedBagEncoder>();
  private loaded = false;

  load(specs: EncoderSpec[]): void {
    for (const spec of specs) {
      this.encoders.set(spec.id, new HashedBagEncoder(spec));
    }
    this.loaded = true;
  }

  get ready(): boolean {
    return this.loaded && this.encoders.size > 0;
  }

  get(id: string): HashedBagEncoder | undefined {
    return this.encoders.get(id);
  }

  list(): string[] {
    return [...this.encoders.keys()].sort();
  }
}
