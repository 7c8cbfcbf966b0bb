/** Built-in environment factories addressable as builtin:<name>. */
import { BanditEnv, GridMazeEnv, GymEnv } from "./env.js";

export const builtinFactories: Record<string, () => GymEnv> = {
  bandit: () => new BanditEnv(),
  grid5: () => new GridMazeEnv(5),
};
