#!/usr/bin/env node
/**
 * gym-serve: serve reset/step environments over the training wire protocol.
 *
 *   gym-serve --env-module builtin:bandit --address 127.0.0.1:4431 --max-connections 4
 *   gym-serve --env-module ./my_envs.js:makeEnv --address 0.0.0.0:5000
 *
 * The module reference is <module>:<export>; `builtin:` selects a bundled
 * environment. The export must be a zero-argument factory returning an
 * object with a spec ({obsDims, dtype, numActions}), reset(), and
 * step(action) -> {observation, reward, done}.
 */
import { pathToFileURL } from "node:url";
import * as path from "node:path";
import { builtinFactories } from "./builtin.js";
import { GymEnv } from "./env.js";
import { serveGym } from "./server.js";

interface CliArgs {
  envModule: string;
  address: string;
  maxConnections: number;
}

function parseArgs(argv: string[]): CliArgs {
  const args: CliArgs = {
    envModule: "builtin:bandit",
    address: "127.0.0.1:4432",
    maxConnections: 4,
  };
  for (let i = 0; i < argv.length; i++) {
    const flag = argv[i];
    const value = argv[i + 1];
    switch (flag) {
      case "--env-module":
        args.envModule = requireValue(flag, value);
        i++;
        break;
      case "--address":
        args.address = requireValue(flag, value);
        i++;
        break;
      case "--max-connections":
        args.maxConnections = Number(requireValue(flag, value));
        if (!Number.isInteger(args.maxConnections) || args.maxConnections < 1) {
          usageError(`--max-connections must be a positive integer`);
        }
        i++;
        break;
      case "--help":
      case "-h":
        console.log(
          "usage: gym-serve --env-module <module>:<factory> --address HOST:PORT --max-connections N",
        );
        process.exit(0);
      default:
        usageError(`unknown flag ${flag}`);
    }
  }
  return args;
}

function requireValue(flag: string, value: string | undefined): string {
  if (value === undefined) usageError(`${flag} needs a value`);
  return value!;
}

function usageError(message: string): never {
  console.error(message);
  process.exit(2);
}

async function resolveFactory(ref: string): Promise<() => GymEnv> {
  const sep = ref.lastIndexOf(":");
  if (sep <= 0) usageError(`--env-module must look like <module>:<factory>, got '${ref}'`);
  const moduleRef = ref.slice(0, sep);
  const exportName = ref.slice(sep + 1);
  if (moduleRef === "builtin") {
    const factory = builtinFactories[exportName];
    if (!factory) {
      usageError(`unknown builtin '${exportName}'; have: ${Object.keys(builtinFactories).join(", ")}`);
    }
    return factory;
  }
  const url = pathToFileURL(path.resolve(moduleRef)).href;
  const mod = await import(url);
  const factory = mod[exportName];
  if (typeof factory !== "function") {
    usageError(`module '${moduleRef}' has no factory export '${exportName}'`);
  }
  return factory as () => GymEnv;
}

async function main(): Promise<void> {
  const args = parseArgs(process.argv.slice(2));
  const [host, portText] = splitAddress(args.address);
  const factory = await resolveFactory(args.envModule);
  // validate the factory once before accepting connections
  const probe = factory();
  if (!probe || typeof probe.reset !== "function" || typeof probe.step !== "function") {
    usageError(`factory from '${args.envModule}' does not implement reset/step`);
  }
  const server = await serveGym({
    host,
    port: portText,
    maxConnections: args.maxConnections,
    envFactory: factory,
  });
  console.log(`serving ${args.envModule} on ${server.host}:${server.port}`);
  const shutdown = () => {
    server.close().then(() => process.exit(0));
  };
  process.on("SIGINT", shutdown);
  process.on("SIGTERM", shutdown);
}

function splitAddress(address: string): [string, number] {
  const sep = address.lastIndexOf(":");
  if (sep <= 0) usageError(`--address must look like HOST:PORT, got '${address}'`);
  const port = Number(address.slice(sep + 1));
  if (!Number.isInteger(port) || port < 0 || port > 65535) {
    usageError(`bad port in '${address}'`);
  }
  return [address.slice(0, sep), port];
}

main().catch((err) => {
  console.error(err instanceof Error ? err.message : String(err));
  process.exit(1);
});
