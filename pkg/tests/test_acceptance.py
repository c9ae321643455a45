"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line, also repeated in the terminal summary."""
import numpy as np
import pytest

from cvit import tensor as T
from cvit.analytics import apf, compare_to_backbone, cost_report, count_flops, count_params
from cvit.ccffn import CCFFN, ChunkFFN, ccffn_flops, ccffn_param_count, split_channels
from cvit.checkpoint import load_checkpoint, save_checkpoint
from cvit.cli import ablation_rows, parse_grid, reference_rows
from cvit.errors import (CheckpointError, CheckpointFormatError, CheckpointShapeError,
                         CheckpointTruncatedError, CheckpointVersionError)
from cvit.model import apply_weight_sharing, backbone_of, build, preset, tiny_config, tiny_preset
from cvit.nn import fuse_model
from cvit.rng import RngState
from cvit.train import KDParams, OptimConfig, gradcheck, make_toy_dataset, train_loop

from conftest import ACCEPTANCE_LINES, scramble


def verdict(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


TABLE2 = {"S": (1.9, 67), "M": (3.5, 173), "L": (7.0, 249), "XL": (9.8, 435)}


def test_c1_table2_structure():
    parts, ok = [], True
    for name, (mp, mf) in TABLE2.items():
        r = cost_report(build(preset(name)), 224)
        dp, df = r.mparams / mp - 1, r.mflops / mf - 1
        ok &= abs(dp) <= 0.12 and abs(df) <= 0.12
        parts.append(f"{name} {r.mparams:.2f}M ({dp:+.1%}) {r.mflops:.1f}MF ({df:+.1%})")
    verdict(1, ok, "; ".join(parts))


def test_c2_backbone_reduction():
    cfg = preset("L")
    red = compare_to_backbone(cfg, backbone_of(cfg))
    ok = 15 <= red.param_reduction <= 25 and 10 <= red.flop_reduction <= 20
    verdict(2, ok, f"L params -{red.param_reduction:.2f}% FLOPs -{red.flop_reduction:.2f}%")


def test_c3_apf_table():
    rows = reference_rows()
    worst = max(abs(apf(r["top1"], r["mflops"]).apf - r["printed"]) for r in rows)
    named = {r["model"]: round(apf(r["top1"], r["mflops"]).apf, 1) for r in rows}
    spot = {k: named[k] for k in ("CVIT-M", "CVIT-L", "CVIT-XL", "CoCa (SOTA)")}
    ok = len(rows) == 16 and worst <= 0.05 and spot == {"CVIT-M": 31.2, "CVIT-L": 30.5,
                                                         "CVIT-XL": 28.6, "CoCa (SOTA)": 24.9}
    verdict(3, ok, f"{len(rows)} rows, worst |diff| {worst:.4f}, {spot}")


def _ccffn_suite():
    root = RngState(2024)
    for i in range(1000):
        r = root.child(i)
        n = int(r.integers(1, 5))
        c = n * int(r.child("c").integers(1, 5))
        x = r.child("x").normal((int(r.child("b").integers(1, 3)), c, 2, 3))
        if T.concat(split_channels(T.tensor(x), n), axis=1).data.tobytes() != x.tobytes():
            return f"round trip {i} differs"

    n = 4
    layer = scramble(CCFFN(4 * n, n, 2.5, rng=root.child("L")), root.child("s"), conv_std=0.5)
    x = root.child("xc").normal((2, 4 * n, 3, 3))
    base = layer(T.tensor(x)).data
    for j in range(n):
        xp = x.copy()
        xp[:, 4 * j:4 * (j + 1)] += 1.0
        out = layer(T.tensor(xp)).data
        if out[:, :4 * j].tobytes() != base[:, :4 * j].tobytes():
            return f"chunk {j} perturbation leaked upstream"
        if np.array_equal(out[:, 4 * j:], base[:, 4 * j:]):
            return f"chunk {j} perturbation had no effect"

    single = CCFFN(8, 1, 2, rng=root.child("n1"))
    plain = ChunkFFN(8, 16)
    plain.expand, plain.project = single.ffns[0].expand, single.ffns[0].project
    x = T.tensor(root.child("x1").normal((2, 8, 3, 3)))
    if single(x).data.tobytes() != plain(x).data.tobytes():
        return "n=1 differs from plain FFN"

    sweep = 0
    for i in range(60):
        r = root.child("sweep").child(i)
        n = int(r.integers(1, 5))
        c = n * int(r.child("c").integers(1, 7))
        e = (1, 1.5, 2, 2.5, 3, 4)[int(r.child("e").integers(0, 6))]
        cascade, proj = bool(r.child("k").integers(0, 2)), bool(r.child("p").integers(0, 2))
        hw = int(r.child("hw").integers(1, 6))
        layer = CCFFN(c, n, e, cascade, proj)
        if count_params(layer).total_params != ccffn_param_count(layer):
            return f"param counter mismatch at {layer.extra_repr()}"
        if count_flops(layer, hw, in_channels=c).total_flops != ccffn_flops(layer, hw, hw):
            return f"FLOP counter mismatch at {layer.extra_repr()}"
        sweep += 1
    return f"1000 round trips, causality n=4, n=1 bitwise, {sweep}-config counter sweep"


def test_c4_ccffn_suite():
    detail = _ccffn_suite()
    verdict(4, detail.startswith("1000"), detail)


GRAD_TOLS = {"linear": 1e-6, "conv": 1e-6, "ccffn": 1e-4, "cga": 1e-4, "block": 1e-4, "kd_loss": 1e-4}


def test_c5_gradients():
    errs = {name: gradcheck(name) for name in GRAD_TOLS}
    ok = all(errs[k] < tol for k, tol in GRAD_TOLS.items())
    verdict(5, ok, ", ".join(f"{k} {v:.1e}<{GRAD_TOLS[k]:.0e}" for k, v in errs.items()))


def test_c6_bn_fusion():
    model = scramble(build(tiny_config(), 0), RngState(6))
    x = T.tensor(RngState(7).normal((4, 3, 64, 64)))
    ref = model(x).data
    fused = fuse_model(model)
    diff = float(np.abs(fused(x).data - ref).max())
    verdict(6, diff < 1e-4, f"max |logit diff| {diff:.2e} (logit scale {np.abs(ref).max():.2f})")


def test_c7_toy_learning():
    data = make_toy_dataset()
    optim = OptimConfig(epochs=20)
    teacher = build(tiny_preset("L"), RngState(1).child("teacher"))
    train_loop(teacher, data, optim, rng=RngState(1).child("teacher-train"))
    runs = {}
    for label, kd in (("no-KD", None), ("KD", (teacher, KDParams()))):
        model = build(tiny_preset("S"), RngState(1).child("model"))
        tr = train_loop(model, data, optim, kd=kd, rng=RngState(1).child("train"))
        runs[label] = tr
    base = runs["no-KD"]
    hit = next((r.epoch for r in base if r.val_acc >= 0.95), None)
    ok = hit is not None and runs["KD"].final_val_acc >= base.final_val_acc
    verdict(7, ok, f"no-KD reaches 95% at epoch {hit}, final {base.final_val_acc:.3f}; "
                   f"KD final {runs['KD'].final_val_acc:.3f}")


def test_c8_ablation_directions():
    rows = ablation_rows(preset("M"), parse_grid(["chunks=2,4", "ratio=2.5,4", "cascade=on,off"]), 224)
    get = {(r["chunks"], r["ratio"], r["cascade"]): r for r in rows}
    fewer = all(get[(4, 2.5, True)][k] < get[(2, 2.5, True)][k] for k in ("params", "mflops"))
    more = all(get[(2, 4.0, True)][k] > get[(2, 2.5, True)][k] for k in ("params", "mflops"))
    same = all((r["params"], r["mflops"]) == (get[(n, e, not c)]["params"], get[(n, e, not c)]["mflops"])
               for (n, e, c), r in get.items())
    shared = apply_weight_sharing(build(preset("M")))
    saves = shared.sharing.params_after < shared.sharing.params_before
    verdict(8, fewer and more and same and saves,
            f"n4<n2 {fewer}, e4>e2.5 {more}, cascade-invariant {same}, sharing "
            f"{shared.sharing.params_before}->{shared.sharing.params_after}")


def _corruptions(buf):
    bad_magic = b"XXXX" + buf[4:]
    bad_version = buf[:4] + (999).to_bytes(4, "little") + buf[8:]
    return {"format": bad_magic, "version": bad_version, "truncated": buf[:len(buf) // 2]}


def test_c9_determinism_and_persistence(tmp_path):
    def run():
        model = build(tiny_config(), 11)
        data = make_toy_dataset(train_per_class=8, val_per_class=4, seed=11)
        tr = train_loop(model, data, OptimConfig(epochs=2, batch_size=8), rng=11)
        x = T.tensor(RngState(12).normal((2, 3, 64, 64)))
        return model, tr.to_csv(), model.eval()(x).data.tobytes(), x

    m1, t1, y1, x = run()
    m2, t2, y2, _ = run()
    init_same = all(a.data.tobytes() == b.data.tobytes()
                    for (_, a), (_, b) in zip(build(tiny_config(), 5).named_parameters(),
                                              build(tiny_config(), 5).named_parameters()))
    reproducible = init_same and t1 == t2 and y1 == y2

    p1, p2 = tmp_path / "a.cvit", tmp_path / "b.cvit"
    save_checkpoint(m1, p1)
    save_checkpoint(m2, p2)
    same_file = p1.read_bytes() == p2.read_bytes()
    reloaded = load_checkpoint(p1).eval()(x).data.tobytes() == y1

    codes = {}
    for expect, blob in _corruptions(p1.read_bytes()).items():
        path = tmp_path / f"{expect}.cvit"
        path.write_bytes(blob)
        try:
            load_checkpoint(path)
            codes[expect] = None
        except CheckpointError as e:
            codes[expect] = e.code
    distinct = all(k == v for k, v in codes.items()) and len({c.code for c in (
        CheckpointFormatError, CheckpointVersionError, CheckpointShapeError, CheckpointTruncatedError)}) == 4
    verdict(9, reproducible and same_file and reloaded and distinct,
            f"build/train/infer bitwise {reproducible}, checkpoint files identical {same_file}, "
            f"reload bitwise {reloaded}, error codes {codes}")
