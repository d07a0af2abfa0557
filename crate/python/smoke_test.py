"""Quick check of the Python bindings on a tiny run.

Build and install first:  pip install crates/py   (or maturin develop)
"""

import math
import tempfile
from pathlib import Path

import dmuq_py as dm

TINY = """
seed = 5
[splits]
train = { scenes = 1, frames = 20 }
val = { scenes = 1, frames = 10 }
test = { scenes = 1, frames = 10 }
[detector]
epochs = 1
[doublem]
block_length = 5
n_bootstraps = 1
refine_epochs = 1
[eval]
modes = ["inter"]
methods = ["dm", "doublem"]
"""


def main():
    cfg = dm.Config(TINY)
    assert cfg.seed == 5
    assert dm.Config(cfg.to_toml()) == cfg

    sq = [[0, 0], [2, 0], [2, 2], [0, 2]]
    shifted = [[1, 0], [3, 0], [3, 2], [1, 2]]
    assert abs(dm.quad_iou(sq, shifted) - 1 / 3) < 1e-12

    bar = dm.combine_covariance([[1, 0], [0, 1]], [[2, 0], [0, 2]], [[4, 0], [0, 4]])
    assert bar == [[4.0, 0.0], [0.0, 4.0]]
    rx, ry, _ = dm.ellipse_95([[0.25, 0], [0, 0.25]])
    assert abs(rx - 0.5 * math.sqrt(5.991)) < 1e-12 and abs(ry - rx) < 1e-12
    se = dm.estimate_sigma_e([[1, 0], [-1, 0], [0, 2], [0, -2]])
    assert se == [[0.5, 0.0], [0.0, 2.0]]

    try:
        dm.Config("seed = 1\n[detector]\nvariant = 'nope'\n")
    except ValueError as e:
        assert str(e).startswith("config:")
    else:
        raise AssertionError("bad config accepted")

    with tempfile.TemporaryDirectory() as tmp:
        data, art = Path(tmp, "data"), Path(tmp, "artifacts")
        counts = dict(dm.generate(cfg, data))
        assert counts == {"train": 20, "val": 10, "test": 10}, counts
        paths = dm.train(cfg, "doublem", "inter", data, art)
        paths += dm.train(cfg, "dm", "inter", data, art)
        assert len(paths) == 3 and all(Path(p).exists() for p in paths)
        rows = dm.evaluate(cfg, art, data)
        assert [(r.mode, r.uq_method) for r in rows] == [("inter", "dm"), ("inter", "doublem")]
        for r in rows:
            assert r.ap70 <= r.ap50
            print(r)
        svg = dm.render_frame(cfg, art, data, 0)
        assert svg.startswith("<svg")
    print("smoke test ok")


if __name__ == "__main__":
    main()
