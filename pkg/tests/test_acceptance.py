"""One test per acceptance criterion; each records a PASS/FAIL line before asserting."""
from __future__ import annotations

import itertools
import json
import time
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
from helpers import run_pipeline, tiny_run_config

from vars_ecg import numerics as nx
from vars_ecg.checkpoint import from_bytes, to_bytes
from vars_ecg.classify import graph_embedding, head_loss
from vars_ecg.cli import main
from vars_ecg.contrastive import LossWeights, nt_xent, total_loss
from vars_ecg.encoder import MaskPlan, encode_features, mask_nodes, scaled_cosine_error
from vars_ecg.graphcon import threshold_adjacency
from vars_ecg.interpret import DEFAULT_TOLERANCES, explain, match_rate, tolerance_sweep, validate_explanation
from vars_ecg.model import ClassifierHead, EncoderState
from vars_ecg.numerics import Tensor, finite_difference_check, make_rng
from vars_ecg.signal import EcgRecord, default_synth_spec, synth_generate
from vars_ecg.subgraph import jse_loss
from vars_ecg.train import TrainConfig, batch_losses, init_state, node_features

SEEDS = range(10)
GRAD_TOL = 1e-4


def _loss_suite():
    """(name, f, point) triples covering every training and classifier loss."""
    for seed in SEEDS:
        rng = make_rng(seed, "acceptance-grad")
        X = rng.normal(size=(6, 5))
        plan = MaskPlan(tuple(sorted(rng.choice(6, 4, replace=False).tolist())), 0.7)
        yield "scaled_cosine", lambda t, X=X, plan=plan: scaled_cosine_error(X, t, plan, 2.0), rng.normal(size=(6, 5))
        Hg, p = rng.normal(size=(4, 5)), rng.normal(size=5)
        yield "jse", lambda t, Hg=Hg, p=p: jse_loss(Hg, t, p), rng.normal(size=(4, 5))
        Zs = rng.normal(size=(4, 5))
        yield "nt_xent", lambda t, Zs=Zs: nt_xent(t, Zs, 0.5), rng.normal(size=(4, 5))
        w = LossWeights(*rng.uniform(0.1, 1.0, 3))
        plan4 = MaskPlan((0, 2), 0.5)
        Xr = rng.normal(size=(4, 5))

        def total(t, Xr=Xr, Hg=Hg, p=p, Zs=Zs, w=w, plan4=plan4):
            return total_loss(scaled_cosine_error(Xr, t, plan4), jse_loss(Hg, t, p), nt_xent(t, Zs), w)
        yield "total", total, rng.normal(size=(4, 5))
        for mode in ("single", "multi"):
            head = ClassifierHead.init(5, 3, rng, mode)
            y = rng.integers(0, 3, size=6) if mode == "single" else (rng.random((6, 3)) < 0.5).astype(float)
            yield f"head_{mode}", lambda t, head=head, y=y: head_loss(head, t, y), rng.normal(size=(6, 5))


def test_criterion_1_gradient_suite(acceptance):
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for name, f, point in _loss_suite():
        worst[name] = max(worst.get(name, 0.0), finite_difference_check(f, point))
    secs = time.perf_counter() - t0
    ok = max(worst.values()) < GRAD_TOL and secs < 30.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {secs:.2f}s"
    acceptance(1, "gradient suite, 10 seeds, rel < 1e-4, < 30 s", ok, detail)
    assert ok, detail


def test_criterion_2_loss_identities(acceptance):
    X = make_rng(0).normal(size=(5, 4))
    plan = MaskPlan(tuple(range(5)), 0.5)
    col = scaled_cosine_error(X, 2.5 * X, plan, 2.0).item()
    X2, Y = X.copy(), np.zeros_like(X)
    X2[:, 0], Y[:, 0] = 0.0, 1.0
    orth = scaled_cosine_error(X2, Y, plan, 2.0).item()
    anti = scaled_cosine_error(X, -X, plan, 2.0).item()
    single = nt_xent(make_rng(1).normal(size=(1, 4)), make_rng(2).normal(size=(1, 4)), 0.5).item()
    rng = make_rng(3)
    linear = True
    for _ in range(50):
        lams, comps = rng.uniform(0, 3, 3), rng.normal(size=3)
        got = total_loss(*(Tensor(c) for c in comps), LossWeights(*lams)).item()
        want = lams[0] * comps[0] + lams[1] * comps[1] + lams[2] * comps[2]
        linear &= got == want
    ok = abs(col) < 1e-12 and abs(orth - 1) < 1e-12 and abs(anti - 4) < 1e-12 and single == 0.0 and linear
    detail = f"cos {col:.1e}/{orth:.12f}/{anti:.12f}, nt_xent(L=1)={single}, linear={linear}"
    acceptance(2, "loss identities", ok, detail)
    assert ok, detail


def test_criterion_3_adjacency_contract(acceptance):
    n = 40
    W = (make_rng(0).permutation(n * n).reshape(n, n) + 1.0) / (n * n + 1)
    A, theta = threshold_adjacency(W, 0.75)
    nnz = int(np.count_nonzero(A))
    off = ~np.eye(n, dtype=bool)
    antitone = bounded = True
    qs = np.linspace(0.0, 0.95, 20)
    prev = None
    for q in qs:
        Aq, th = threshold_adjacency(W, q)
        bounded &= bool(np.all(Aq[Aq != 0] >= th)) and not np.any(np.diag(Aq))
        if prev is not None:
            antitone &= bool(np.all((Aq != 0) <= (prev != 0)))
        prev = Aq
    ok = nnz == 390 and antitone and bounded and bool(np.all(A[off & (A != 0)] >= theta))
    detail = f"nonzeros {nnz}, antitone={antitone}, >= theta={bounded}"
    acceptance(3, "adjacency contract (q=0.75, 40 nodes)", ok, detail)
    assert ok, detail


def test_criterion_4_masking_contract(acceptance):
    token = Tensor(make_rng(0).normal(size=5))
    bad = []
    for rate in [round(0.1 * i, 1) for i in range(1, 10)]:
        for n in range(3, 51):
            X = make_rng(n).normal(size=(n, 5))
            Xt, plan = mask_nodes(X, rate, make_rng(n, "m"), token)
            want = int((Decimal(str(rate)) * n).quantize(Decimal(1), rounding=ROUND_HALF_UP))
            want = max(1, want)  # documented floor: never mask zero nodes
            idx = np.asarray(plan.masked)
            exact = Xt.data[idx].tobytes() == np.tile(token.data, (len(idx), 1)).tobytes()
            if len(plan) != want or len(set(plan.masked)) != len(idx) or not exact:
                bad.append((rate, n))
    ok = not bad
    detail = f"{9 * 48} (rho, N) cells, {len(bad)} mismatches" + (f", first {bad[0]}" if bad else "")
    acceptance(4, "masking contract", ok, detail)
    assert ok, detail


def test_criterion_5_permutations(acceptance):
    worst = 0.0
    for aggregation in ("sum", "mean"):
        for seed in range(5):
            rng = make_rng(seed, "acceptance-perm")
            state = EncoderState.init(6, 8, rng, aggregation=aggregation)
            X = rng.normal(size=(4, 6))
            A = rng.random((4, 4)) * (rng.random((4, 4)) < 0.6)
            np.fill_diagonal(A, 0)
            H, z = encode_features(X, A, state)
            for perm in itertools.permutations(range(4)):
                p = np.array(perm)
                Hp, zp = encode_features(X[p], A[np.ix_(p, p)], state)
                worst = max(worst, np.abs(Hp.data - H.data[p]).max(), np.abs(zp.data - z.data).max())
    ok = worst < 1e-10
    acceptance(5, "24-permutation equivariance/invariance", ok, f"max deviation {worst:.1e}")
    assert ok


def test_criterion_6_end_to_end(e2e, acceptance):
    acc, f1, secs = e2e.report_all.accuracy, e2e.report_risk.macro_f1, e2e.seconds["total"]
    ok = acc >= 0.80 and f1 >= 0.70 and secs < 600
    detail = f"accuracy {acc:.3f}, risk macro-F1 {f1:.3f}, {secs:.0f}s ({len(e2e.train)}/{len(e2e.test)} split)"
    acceptance(6, "desk-scale end to end", ok, detail)
    assert ok, detail


def test_criterion_7_interpretability(e2e, acceptance):
    rate = match_rate(e2e.explanations, e2e.references, 0.5)
    tols = sorted(set(DEFAULT_TOLERANCES) | {float(t) for t in np.arange(0.0, 5.01, 0.25)})
    curve = tolerance_sweep(e2e.explanations, e2e.references, tols)
    rates = [r for _, r in curve]
    monotone = all(a <= b for a, b in zip(rates, rates[1:]))
    ok = rate.rate >= 0.70 and monotone
    detail = f"match rate {rate.rate:.3f} at 0.5 s ({rate.matched}/{rate.evaluated}), monotone={monotone}"
    acceptance(7, "top-1 segment match rate", ok, detail)
    assert ok, detail


def test_criterion_8_versatility(e2e, acceptance):
    out = []
    ok = True
    for n_leads, rate, seconds in ((2, 360, 9), (12, 500, 10)):
        rng = make_rng(n_leads, "versatility")
        rec = EcgRecord(rng.normal(size=(n_leads, rate * seconds)), rate, f"v{n_leads}", 1,
                        [(2.0, 3.0)])
        graph, z = graph_embedding(e2e.checkpoint, rec)
        want_nodes = n_leads * ((rate * seconds) // e2e.checkpoint.config.interval_len)
        e = explain(e2e.checkpoint, rec)
        validate_explanation(json.loads(e.to_json()))
        good = (graph.n_nodes == want_nodes and z.shape == (e2e.checkpoint.config.hidden,)
                and bool(np.all(np.isfinite(z))) and e.node_importance.size == want_nodes)
        ok &= good
        out.append(f"{n_leads}x{rate}Hzx{seconds}s: {graph.n_nodes} nodes, {graph.edges()[0].size} edges")
    detail = "; ".join(out)
    acceptance(8, "one checkpoint, two record shapes", ok, detail)
    assert ok, detail


def _zeroed_lambda_exact(records) -> bool:
    names = ("rec", "jse", "cl")
    for zero in range(3):
        lams = [1.0, 1.0, 1.0]
        lams[zero] = 0.0
        cfg = TrainConfig(hidden=16, num_heads=2, lambda_rec=lams[0], lambda_jse=lams[1], lambda_cl=lams[2])
        state = init_state(cfg)
        losses = batch_losses(node_features(records, cfg), state, cfg, make_rng(1))
        params = state.named_parameters(include_head=False)
        nx.backward(losses.total, params.values())
        got = [t.grad.copy() for t in params.values()]
        state.zero_grad()
        kept = [getattr(losses, names[k]) for k in range(3) if k != zero]
        nx.backward(nx.add(kept[0], kept[1]), params.values())
        if not all(np.array_equal(g, t.grad) for g, t in zip(got, params.values())):
            return False
    return True


def test_criterion_9_ablation_hooks(tmp_path, acceptance):
    records = synth_generate(default_synth_spec(2), seed=4)
    exact = _zeroed_lambda_exact(records)
    root = tmp_path / "abl"
    root.mkdir()
    doc = tiny_run_config()
    doc["sweep"] = {"parameter": "lambda_cl"}  # default grid 0.1..1.0
    (root / "run.json").write_text(json.dumps(doc))
    codes = [main(["synth", "--config", str(root / "run.json"), "--out", str(root / "data")]),
             main(["sweep", "--config", str(root / "run.json"), "--out", str(root / "sweep")])]
    lines = (root / "sweep" / "sweep.csv").read_text().splitlines() if codes == [0, 0] else []
    rows = lines[1:]
    values = [r.split(",")[1] for r in rows]
    ok = exact and codes == [0, 0] and len(rows) == 10 and values == [f"{0.1 * i:.1f}" for i in range(1, 11)]
    detail = f"zeroed-lambda gradient exact={exact}, sweep rows {len(rows)}, exit codes {codes}"
    acceptance(9, "ablation hooks", ok, detail)
    assert ok, detail


def _artifacts(root) -> dict[str, bytes]:
    keep = [root / "eval" / "metrics.csv"]
    keep += sorted((root / "explain" / "explanations").glob("*.json"))
    keep += sorted(root.rglob("*.svg"))
    return {str(p.relative_to(root)): p.read_bytes() for p in keep}


def test_criterion_10_reproducibility(e2e, tmp_path, acceptance):
    blob = to_bytes(e2e.checkpoint)
    round_trip = to_bytes(from_bytes(blob)) == blob
    doc = tiny_run_config(per_class=6, epochs=2)
    codes_a = run_pipeline(tmp_path / "a", doc)
    codes_b = run_pipeline(tmp_path / "b", doc)
    a, b = _artifacts(tmp_path / "a"), _artifacts(tmp_path / "b")
    n_svg = sum(k.endswith(".svg") for k in a)
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    ok = round_trip and same and set(codes_a.values()) == {0} == set(codes_b.values()) and n_svg >= 4
    detail = f"checkpoint round trip={round_trip}, {len(a)} artifacts ({n_svg} SVG) identical={same}"
    acceptance(10, "reproducibility and formats", ok, detail)
    assert ok, detail
