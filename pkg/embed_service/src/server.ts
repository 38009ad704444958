import { buildApp } from "./app.js";
import { loadConfig } from "./config.js";
import { EncoderRegistry } from "./encoder.js";

const config = loadConfig();
const registry = new EncoderRegistry();
registry.load(config.models);

const app = buildApp(registry);
const server = app.listen(config.port, () => {
  const address = server.address();
  const port = typeof address === "object" && address ? address.port : config.port;
  console.error(`embed-service listening on :${port} models=${registry.list().join(",")}`);
});
