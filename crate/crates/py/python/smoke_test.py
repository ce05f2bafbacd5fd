"""Exercise the Python bindings end to end on a tiny problem."""

import math
import tempfile
from pathlib import Path

import mast_py as m


def check_world():
    w = m.World.generate(seed=3)
    assert (w.width, w.height, w.n_classes) == (15, 15, 8)
    assert w.is_connected()
    free = w.free_cells()
    assert free and all(w.cell(x, y) == -1 for x, y in free)
    assert w.geodesic(free[0], free[0]) == 0.0
    same = m.World.from_text(w.to_text())
    assert same == w
    return w


def check_simulator(w):
    sim = m.Simulator(w, seed=7)
    x, y, heading = sim.pose()
    dims, data = sim.image()
    assert dims == [36, 36, 4] and len(data) == 36 * 36 * 4
    info = sim.step("left")
    assert info["pose"] == (x, y, (heading + 3) % 4)
    info = sim.step(2)
    assert info["pose"] == (x, y, heading)
    assert info["steps"] == 2 and not info["done"]
    info = sim.step("stop")
    assert info["done"] and info["stopped"]
    try:
        sim.step("jump")
    except ValueError:
        pass
    else:
        raise AssertionError("bad action accepted")


def check_metrics():
    assert m.spl([(True, 4.0, 8.0), (False, 4.0, 20.0)]) == 0.25
    assert m.episode_success(True, 10, 0.0)
    assert not m.episode_success(True, 500, 0.0)
    assert not m.episode_success(True, 10, 1.0)
    # Centre first, then the four edge neighbours, then the corners.
    assert m.position_indices(1) == [2, 1, 2, 1, 0, 1, 2, 1, 2]
    try:
        m.spl([(True, 0.0, 1.0)])
    except ValueError:
        pass
    else:
        raise AssertionError("zero shortest path accepted")


def check_policy(w, tmp):
    assert "MaAST" in m.variants()
    p = m.Policy("MaAST", seed=1, hidden=16, action_embedding=4, radius=2, map_dim=8, layers=1)
    assert p.variant == "MaAST" and p.n_params > 0
    ep = p.run_episode(w, episode_seed=4)
    assert len(ep["poses"]) == ep["steps"] + 1 == len(ep["actions"]) + 1
    rep = p.evaluate([w], episodes=5, seed=2)
    assert 0.0 <= rep["spl"] <= rep["success"] <= 100.0
    path = tmp / "p.mast"
    p.save(str(path))
    q = m.Policy.load(str(path))
    assert q.evaluate([w], episodes=5, seed=2) == rep
    try:
        m.Policy("Nope")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown variant accepted")


def check_training(tmp):
    worlds = tmp / "worlds"
    files = m.make_worlds(str(worlds), seed=0, count=5, train_fraction=0.6)
    assert len(files) == 5 and (worlds / "manifest.csv").exists()
    cfg = "\n".join(
        [
            f"world.dir = {worlds}",
            "policy.hidden = 16",
            "policy.action_embedding = 4",
            "map.r = 2",
            "map.dim = 8",
            "map.layers = 1",
            "ppo.rollout = 16",
            "ppo.envs = 2",
            "ppo.minibatches = 1",
            "ppo.eval_episodes = 2",
        ]
    )
    out = m.train(cfg, str(tmp / "run"), steps=64)
    assert out["steps"] == 64
    assert Path(out["checkpoint"]).exists()
    assert out["last_eval"] is None or math.isfinite(out["last_eval"]["spl"])
    assert "ppo.lr" in m.default_config()


def main():
    with tempfile.TemporaryDirectory() as d:
        tmp = Path(d)
        w = check_world()
        check_simulator(w)
        check_metrics()
        check_policy(w, tmp)
        check_training(tmp)
    print("smoke test passed")


if __name__ == "__main__":
    main()
