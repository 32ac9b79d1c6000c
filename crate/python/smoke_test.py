"""Smoke test for the uyoco_py extension module.

Build and install first:
    pip install --no-build-isolation ./crates/python
then run:
    python python/smoke_test.py
"""

import math
import tempfile

import uyoco_py as u


def close(a, b, tol):
    return max(abs(x - y) for x, y in zip(a, b)) <= tol


def main():
    cfg = u.Config("uyoco", loops=3)
    assert cfg.param_count() == 225920, cfg.param_count()
    assert u.Config("transformer").param_count() == 229952
    assert cfg.plan(), "empty plan"
    print(cfg, "params", cfg.param_count())

    try:
        u.Config("yoco", loops=3)
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("looped yoco accepted")

    model = u.Model(cfg)
    assert model.num_parameters() == cfg.param_count()
    tokens = [(7 * i + 3) % cfg.vocab for i in range(24)]
    full = model.forward(tokens)
    assert len(full) == len(tokens) and len(full[0]) == cfg.vocab

    session, first = model.prefill(tokens[:1])
    drift = max(abs(x - y) for x, y in zip(first, full[0]))
    for i, t in enumerate(tokens[1:], start=1):
        drift = max(drift, max(abs(x - y) for x, y in zip(session.step(t), full[i])))
    assert drift <= 1e-4, drift
    stats = session.cache_stats()
    print("decode drift", drift, "cache", stats)

    # the global cache grows with the context, the windowed one does not
    longer, _ = model.prefill(tokens + tokens)
    grown = longer.cache_stats()
    assert grown["global"] == 2 * stats["global"] and grown["local"] == stats["local"]

    assert len(model.generate(tokens[:4], 5)) == 5

    table = u.paper_kv_table()
    assert len(table) == 24 and all(c["matches"] for c in table)
    r = u.cost_report(cfg, 4096)
    assert r["kv_bytes"] == r["kv_global_bytes"] + r["kv_local_bytes"]
    print("kv bytes at 4096:", r["kv_bytes"])

    assert math.isclose(u.angular_distance([1.0, 0.0], [0.0, 2.0]), 0.5, abs_tol=1e-12)
    profile = model.profile([tokens[:12], tokens[12:]])
    assert profile and all(0.0 <= float(e["mean_distance"]) <= 1.0 for e in profile)

    small = u.Config("uyoco", loops=2, d_model=16, n_heads=2, kv_heads=1, ffn_hidden=48, window=4, vocab=32)
    trained, summary = u.train(small, task="copy", steps=20, batch_size=8, copy_len=4)
    assert len(summary["losses"]) <= 20 and summary["losses"][-1] < summary["losses"][0]
    print("train loss", summary["losses"][0], "->", summary["losses"][-1])

    with tempfile.TemporaryDirectory() as d:
        trained.save(d + "/ckpt")
        again = u.Model.load(d + "/ckpt")
        assert close(again.forward([1, 2, 3])[-1], trained.forward([1, 2, 3])[-1], 0.0)

    print("smoke test passed")


if __name__ == "__main__":
    main()
