import express, { type Express } from "express";
import { z } from "zod";

import { EncoderRegistry } from "./encoder.js";

export const MAX_BATCH = 512;

const embedRequestSchema = z.object({
  texts: z.array(z.string()).min(1),
  model: z.string().min(1),
  normalize: z.boolean().optional().default(false),
});

export function buildApp(registry: EncoderRegistry): Express {
  const app = express();
  app.use(express.json({ limit: "8mb" }));

  app.get("/health", (_req, res) => {
    if (!registry.ready) {
      res.status(503).json({ status: "initializing", models: [] });
      return;
    }
    res.json({ status: "ok", models: registry.list() });
  });

  app.post("/embed", (req, res) => {
    if (!registry.ready) {
      res.status(503).json({ error: "encoders are still loading" });
      return;
    }
    const parsed = embedRequestSchema.safeParse(req.body);
    if (!parsed.success) {
      res.status(400).json({ error: "malformed request", details: parsed.error.issues });
      return;
    }
    const { texts, model, normalize } = parsed.data;
    if (texts.length > MAX_BATCH) {
      res.status(413).json({ error: `batch too large: ${texts.length} > ${MAX_BATCH}` });
      return;
    }
    if (texts.some((t) => t.trim().length === 0)) {
      res.status(400).json({ error: "every text must be non-empty after trimming" });
      return;
    }
    const encoder = registry.get(model);
    if (!encoder) {
      res.status(404).json({ error: `unknown model: ${model}`, models: registry.list() });
      return;
    }
    const vectors = encoder.encodeBatch(texts, normalize);
    res.json({ vectors, dimension: encoder.dimension, model: encoder.id });
  });

  app.use((_req, res) => {
    res.status(404).json({ error: "not found" });
  });

  // Malformed JSON bodies surface from the parser middleware as an error.
  app.use((err: Error, _req: express.Request, res: express.Response, _next: express.NextFunction) => {
    res.status(400).json({ error: err.message });
  });

  return app;
}
