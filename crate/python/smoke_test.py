"""Smoke test for the fsdt extension module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml --release`.
"""

import math
import tempfile
from pathlib import Path

import fsdt

TINY_RUN = """
seeds = [0]
eval_episodes = 2
[model]
hidden_dim = 16
n_blocks = 1
context_len = 4
[fed]
rounds = 2
client_steps = 2
server_steps = 5
batch_size = 4
heldout_batch = 8
[[collect.plan]]
episodes = 3
policy = { kind = "heuristic", noise = 0.2 }
[[collect.heldout]]
episodes = 2
policy = { kind = "random" }
"""


def main():
    counts = fsdt.param_counts()
    assert counts == {"embedding": 42_496, "decoder": 4_738_560, "prediction": 15_677, "total": 4_796_733}, counts
    assert fsdt.fl_exchange(20, counts["total"]) == 191_869_320
    print(fsdt.split_table(), end="")

    grid = fsdt.tile_map(0.375, 0.5)
    assert grid[1][2] == "high"
    assert sum(row.count("high") for row in grid) >= 1

    assert fsdt.returns_to_go([1.0, 2.0, 3.0]) == [6.0, 5.0, 3.0]
    stats = fsdt.box_stats([1, 2, 3, 4, 5])
    assert (stats["q1"], stats["median"], stats["q3"]) == (2, 3, 4)

    env = fsdt.MecEnv("WiFi/InH", seed=3, split="test")
    obs = env.reset()
    assert len(obs) == env.state_dim == 36
    total, done = 0.0, False
    while not done:
        obs, reward, done, info = env.step([0.5] * env.action_dim)
        total += reward
        assert all(0 < t < 1 for t in info["latency_s"])
    assert math.isfinite(total)

    try:
        env.step([0.5] * env.action_dim)
    except RuntimeError:
        pass
    else:
        raise AssertionError("stepping a finished episode must fail")
    try:
        fsdt.MecEnv("LTE/UMa")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown profile must be rejected")

    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "run.toml"
        cfg.write_text(TINY_RUN)
        curve = fsdt.train("fsdt", seed=0, config=str(cfg), out=tmp)
        assert len(curve) == 3 and all(math.isfinite(v) for v in curve)
        returns = fsdt.evaluate("fsdt", seed=0, config=str(cfg), out=tmp)
        assert len(returns) == 2 * 5
    print(f"episode return with neutral action: {total:.2f}")
    print("ok")


if __name__ == "__main__":
    main()
