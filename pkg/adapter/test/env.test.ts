import { describe, expect, it, vi } from "vitest";
import {
  BanditEnv,
  EpisodeAccounting,
  GridMazeEnv,
  GymEnv,
} from "../src/env.js";

describe("bandit", () => {
  it("pays 1.0 on arm 1 and 0.0 on arm 0, one step per episode", () => {
    const env = new BanditEnv();
    expect(Array.from(env.reset())).toEqual([1.0]);
    expect(env.step(1)).toMatchObject({ reward: 1.0, done: true });
    expect(env.step(0)).toMatchObject({ reward: 0.0, done: true });
  });
});

describe("grid maze", () => {
  it("starts at the origin with a one-hot observation", () => {
    const env = new GridMazeEnv(5);
    const obs = env.reset();
    expect(obs.length).toBe(25);
    expect(obs[0]).toBe(1.0);
    expect(obs.reduce((a, b) => a + b, 0)).toBe(1.0);
  });

  it("moves right from the origin without reward", () => {
    const env = new GridMazeEnv(5);
    env.reset();
    const { observation, reward, done } = env.step(3);
    expect(reward).toBe(0.0);
    expect(done).toBe(false);
    expect(observation[1]).toBe(1.0);
  });

  it("reaches the goal along the 8-step optimal path", () => {
    const env = new GridMazeEnv(5);
    env.reset();
    const path = [3, 3, 3, 3, 1, 1, 1, 1];
    let last = { reward: 0, done: false };
    for (const a of path) {
      const r = env.step(a);
      last = { reward: r.reward, done: r.done };
    }
    expect(last).toEqual({ reward: 1.0, done: true });
  });

  it("clips at walls and times out with zero reward", () => {
    const env = new GridMazeEnv(5, 3);
    env.reset();
    expect(env.step(0).done).toBe(false); // bump the top wall
    expect(env.step(2).done).toBe(false); // bump the left wall
    const final = env.step(0);
    expect(final).toMatchObject({ reward: 0.0, done: true });
  });
});

describe("episode accounting", () => {
  it("emits the boundary marker first", () => {
    const acc = new EpisodeAccounting(new BanditEnv());
    expect(acc.initial()).toMatchObject({
      reward: 0,
      done: true,
      episodeStep: 0,
      episodeReturn: 0,
    });
  });

  it("reports the completed return on the done row and resets counters", () => {
    const acc = new EpisodeAccounting(new GridMazeEnv(5));
    acc.initial();
    const outs = [3, 3, 3, 3, 1, 1, 1, 1].map((a) => acc.step(a));
    const last = outs[outs.length - 1];
    expect(last.reward).toBe(1.0);
    expect(last.done).toBe(true);
    expect(last.episodeReturn).toBe(1.0);
    expect(last.episodeStep).toBe(0);
    expect(last.observation[0]).toBe(1.0); // next episode's origin
    expect(outs.slice(0, 3).map((o) => o.episodeStep)).toEqual([1, 2, 3]);
  });

  it("converts f64 observations to f32 with a single warning", () => {
    const f64env: GymEnv = {
      spec: { obsDims: [2], dtype: "f64", numActions: 2 },
      reset: () => new Float64Array([0.1, 0.2]),
      step: () => ({ observation: new Float64Array([0.3, 0.4]), reward: 0, done: false }),
    };
    const warn = vi.spyOn(console, "warn").mockImplementation(() => {});
    const acc = new EpisodeAccounting(f64env);
    const first = acc.initial();
    acc.step(0);
    acc.step(1);
    expect(first.observation).toBeInstanceOf(Float32Array);
    expect(first.observation[0]).toBeCloseTo(0.1, 6);
    expect(warn).toHaveBeenCalledTimes(1);
    warn.mockRestore();
  });
});
