/**
 * Environment contract (reset/step with discrete actions) plus the episode
 * accounting wrapper that the protocol session consumes.
 *
 * Accounting convention: done=true marks the FIRST output of an episode.
 * The first output of a fresh wrapper is a boundary marker (reward 0,
 * done=true); when the inner env terminates, the output carries the
 * terminal reward, the completed episode's return, and the next episode's
 * initial observation.
 */

export interface EnvSpec {
  obsDims: number[];
  /** f64 observations are converted to f32 at the wire boundary */
  dtype: "f32" | "f64";
  numActions: number;
}

export interface StepResult {
  observation: ArrayLike<number>;
  reward: number;
  done: boolean;
}

export interface GymEnv {
  spec: EnvSpec;
  reset(): ArrayLike<number>;
  step(action: number): StepResult;
}

export interface EnvOutput {
  observation: Float32Array;
  reward: number;
  done: boolean;
  episodeStep: number;
  episodeReturn: number;
}

/** Two-armed deterministic bandit: arm 0 pays 0.0, arm 1 pays 1.0. */
export class BanditEnv implements GymEnv {
  readonly spec: EnvSpec = { obsDims: [1], dtype: "f32", numActions: 2 };
  private readonly obs = Float32Array.of(1.0);

  reset(): Float32Array {
    return this.obs;
  }

  step(action: number): StepResult {
    if (action !== 0 && action !== 1) throw new Error(`action ${action} outside [0, 2)`);
    return { observation: this.obs, reward: action === 1 ? 1.0 : 0.0, done: true };
  }
}

/**
 * Deterministic N×N maze: start (0,0), reward 1.0 at (N−1,N−1), actions
 * 0:up 1:down 2:left 3:right clipped at walls, zero-reward termination at
 * the step limit. Observations are one-hot f32 of length N².
 */
export class GridMazeEnv implements GymEnv {
  readonly spec: EnvSpec;
  private x = 0;
  private y = 0;
  private steps = 0;

  constructor(readonly side: number = 5, readonly stepLimit: number = 50) {
    this.spec = { obsDims: [side * side], dtype: "f32", numActions: 4 };
  }

  private observe(): Float32Array {
    const obs = new Float32Array(this.side * this.side);
    obs[this.y * this.side + this.x] = 1.0;
    return obs;
  }

  reset(): Float32Array {
    this.x = 0;
    this.y = 0;
    this.steps = 0;
    return this.observe();
  }

  step(action: number): StepResult {
    if (!(action >= 0 && action < 4)) throw new Error(`action ${action} outside [0, 4)`);
    if (action === 0) this.y = Math.max(0, this.y - 1);
    else if (action === 1) this.y = Math.min(this.side - 1, this.y + 1);
    else if (action === 2) this.x = Math.max(0, this.x - 1);
    else this.x = Math.min(this.side - 1, this.x + 1);
    this.steps += 1;
    const goal = this.x === this.side - 1 && this.y === this.side - 1;
    if (goal) return { observation: this.observe(), reward: 1.0, done: true };
    if (this.steps >= this.stepLimit) return { observation: this.observe(), reward: 0.0, done: true };
    return { observation: this.observe(), reward: 0.0, done: false };
  }
}

export class EpisodeAccounting {
  private episodeStep = 0;
  private episodeReturn = 0;
  private warnedF64 = false;

  constructor(private readonly env: GymEnv) {
    if (env.spec.dtype !== "f32" && env.spec.dtype !== "f64") {
      throw new Error(`unsupported observation dtype ${env.spec.dtype}`);
    }
    if (!Number.isInteger(env.spec.numActions) || env.spec.numActions < 1) {
      throw new Error(`numActions must be a positive integer, got ${env.spec.numActions}`);
    }
  }

  get spec(): EnvSpec {
    return this.env.spec;
  }

  private toF32(observation: ArrayLike<number>): Float32Array {
    if (observation instanceof Float32Array) return observation;
    if (this.env.spec.dtype === "f64" && !this.warnedF64) {
      console.warn("gym-serve: converting f64 observations to f32 for the wire");
      this.warnedF64 = true;
    }
    return Float32Array.from(observation as ArrayLike<number>);
  }

  initial(): EnvOutput {
    this.episodeStep = 0;
    this.episodeReturn = 0;
    return {
      observation: this.toF32(this.env.reset()),
      reward: 0,
      done: true,
      episodeStep: 0,
      episodeReturn: 0,
    };
  }

  step(action: number): EnvOutput {
    const { observation, reward, done } = this.env.step(action);
    this.episodeStep += 1;
    this.episodeReturn += reward;
    if (done) {
      const completed = this.episodeReturn;
      this.episodeStep = 0;
      this.episodeReturn = 0;
      return {
        observation: this.toF32(this.env.reset()),
        reward,
        done: true,
        episodeStep: 0,
        episodeReturn: completed,
      };
    }
    return {
      observation: this.toF32(observation),
      reward,
      done: false,
      episodeStep: this.episodeStep,
      episodeReturn: this.episodeReturn,
    };
  }
}
