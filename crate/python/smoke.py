"""End-to-end smoke test of the hope_czsl extension module.

Build and install first:
    pip install --no-build-isolation ./crates/python
"""

import math
import sys
import tempfile
from pathlib import Path

import hope_czsl


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    ds = hope_czsl.Dataset.generate(
        n_attrs=4, n_objs=5, dim=16, samples_per_composition=6, test_samples_per_composition=3, seed=0
    )
    check(ds.dim == 16 and len(ds.attributes) == 4, f"generate {ds!r}")
    emb, labels = ds.train_split()
    check(len(emb) == len(labels) and all(len(e) == 16 for e in emb), "train split shapes")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        ds.save(str(tmp / "data"))
        back = hope_czsl.Dataset.load(str(tmp / "data"))
        check(back.train_split() == ds.train_split(), "dataset round trip")

        model = hope_czsl.Model.train(ds, stage_epochs=[1, 1, 2], batch_size=16, eval_each_epoch=False)
        check(len(model.metrics) == 4, "one metrics row per epoch")
        check(all(math.isfinite(m["total"]) for m in model.metrics), "finite losses")

        closed = model.evaluate(ds, "closed")
        opened = model.evaluate(ds, "open")
        for name, r in (("closed", closed), ("open", opened)):
            check(0.0 <= r["hm"] <= 1.0 and 0.0 <= r["auc"] <= 1.0, f"{name} hm={r['hm']:.3f} auc={r['auc']:.3f}")

        probe = model.probe(ds)
        check(0.0 <= probe["seen_rate"] <= 1.0, f"probe seen={probe['seen_rate']:.3f} unseen={probe['unseen_rate']:.3f}")

        r = model.retrieve(emb[0])
        check(all(abs(sum(row) - 1.0) < 1e-9 for row in r["scores"]), "retrieval scores sum to one")

        feats = model.fused_features(emb[:3])
        check(all(abs(math.sqrt(sum(x * x for x in f)) - 1.0) < 1e-9 for f in feats), "fused features unit length")

        ckpt = tmp / "model.ckpt"
        model.save(str(ckpt))
        loaded = hope_czsl.Model.load(str(ckpt))
        check(loaded.evaluate(ds, "closed") == closed, "checkpoint round trip")

        (tmp / "bad.ckpt").write_bytes(ckpt.read_bytes()[:40])
        try:
            hope_czsl.Model.load(str(tmp / "bad.ckpt"))
            check(False, "truncated checkpoint rejected")
        except ValueError as e:
            check(True, f"truncated checkpoint rejected ({e})")

    sweep = hope_czsl.bias_sweep([[0.9, 0.1], [0.2, 0.8]], [0, 1], [True, False])
    check(sweep["hm"] == 1.0, "bias sweep on separable scores")

    reports = hope_czsl.grad_check(seed=0, max_entries=4)
    check(all(r["passed"] for r in reports), "gradient checks " + ", ".join(r["loss"] for r in reports))

    try:
        hope_czsl.Dataset.generate(bogus=1)
        check(False, "unknown generator key rejected")
    except ValueError:
        check(True, "unknown generator key rejected")

    print("smoke: all checks passed")


if __name__ == "__main__":
    main()
