/**
 * Cross-implementation conformance: the transcripts generated here must be
 * byte-identical to the fixtures committed under ../fixtures/wire, which
 * the trainer's native server also reproduces. Any diff is protocol drift.
 */
import * as fs from "node:fs";
import * as path from "node:path";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";
import { conformanceVectors } from "../src/conformance.js";

const here = path.dirname(fileURLToPath(import.meta.url));
const fixtureDir = path.join(here, "..", "..", "fixtures", "wire");

const SCRIPTS: Record<string, number[]> = {
  bandit_script_1: [1],
  bandit_script_101: [1, 0, 1],
};

function loadFixture(name: string): { s2c: Buffer; c2s: Buffer } {
  return {
    s2c: fs.readFileSync(path.join(fixtureDir, `${name}.s2c.bin`)),
    c2s: fs.readFileSync(path.join(fixtureDir, `${name}.c2s.bin`)),
  };
}

describe("golden transcripts", () => {
  for (const [name, script] of Object.entries(SCRIPTS)) {
    it(`reproduces ${name} byte-for-byte`, () => {
      const generated = conformanceVectors(script);
      const committed = loadFixture(name);
      expect(generated.s2c.toString("hex")).toBe(committed.s2c.toString("hex"));
      expect(generated.c2s.toString("hex")).toBe(committed.c2s.toString("hex"));
    });
  }

  it("emits HELLO plus the initial STEP for an empty script", () => {
    const { s2c, c2s } = conformanceVectors([]);
    // HELLO (19 bytes for a rank-1 f32 spec) + STEP (32 bytes for 1 float)
    expect(s2c.length).toBe(19 + 32);
    expect(s2c.readUInt8(4)).toBe(0x01);
    expect(c2s.toString("hex")).toBe("0100000004"); // just BYE
  });
});
