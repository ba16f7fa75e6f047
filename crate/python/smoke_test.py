"""Smoke test for the sar_rl extension module.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/sar_python-*.whl
"""

import json
import math
import random
import sys
import tempfile

import sar_rl


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    check(set(sar_rl.env_ids()) == {"gridworld-v0", "pointmass-v0"}, "env ids")

    env = sar_rl.Env("gridworld-v0")
    obs = env.reset(3, 7)
    c, h, w = env.obs_shape
    check(len(obs) == c * h * w, "gridworld observation size")
    obs2, reward, done = env.step(0)
    check(len(obs2) == len(obs) and isinstance(done, bool), "gridworld step")
    check(env.optimal_return() is not None, "gridworld optimum")

    pm = sar_rl.Env("pointmass-v0")
    pm.reset(0, 10000)
    _, r, _ = pm.step([0.5, -2.0])
    check(0.0 <= r <= 1.0, "pointmass step")

    rng = random.Random(0)
    shape = [2, 3, 4, 4]
    n = 2 * 3 * 16
    content = [rng.gauss(0, 1) for _ in range(n)]
    source = [rng.gauss(2, 3) for _ in range(n)]
    out = sar_rl.adain(content, source, shape)
    mu_o, sd_o = sar_rl.channel_stats(out, shape)
    mu_s, sd_s = sar_rl.channel_stats(source, shape)
    check(all(abs(a - b) < 1e-4 for a, b in zip(mu_o + sd_o, mu_s + sd_s)), "adain matches source stats")
    mu_n, sd_n = sar_rl.channel_stats(sar_rl.instance_normalize(content, shape), shape)
    check(all(abs(m) < 1e-6 for m in mu_n) and all(abs(s - 1) < 1e-4 for s in sd_n), "instance norm")

    adv, targets = sar_rl.gae([1.0, 0.0], [0.5, 0.5], [False, True], 0.0, 1.0, 1.0)
    check(abs(targets[0] - 1.0) < 1e-12 and abs(adv[1] + 0.5) < 1e-12, "gae")
    check(abs(sar_rl.ema([0.0, 1.0], 0.98)[1] - 0.02) < 1e-15, "ema")

    try:
        sar_rl.resolve_config(json.dumps({"lambda": -1}))
        check(False, "negative lambda rejected")
    except ValueError:
        check(True, "negative lambda rejected")
    resolved = json.loads(sar_rl.resolve_config("{}"))
    check(resolved["algorithm"] == "ppo", "config defaults")

    with tempfile.TemporaryDirectory() as d:
        cfg = {"total_timesteps": 2048, "eval_episodes": 2, "ppo": {"n_steps": 64, "n_envs": 4}}
        result = json.loads(sar_rl.train(json.dumps(cfg), d))
        check(set(result["pools"]) == {"train", "test"}, "train writes both pools")
        s = json.loads(sar_rl.evaluate(d, "test", 2))
        check(all(i >= 10000 for i in s["style_ids"]) and math.isfinite(s["mean"]), "test-pool eval")
        g = json.loads(sar_rl.style_gap(d, 3, 3))
        check(g["index"] >= 0.0, "style gap")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
