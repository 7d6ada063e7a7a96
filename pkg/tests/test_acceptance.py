"""Acceptance checks, one test per criterion.

Each test records ``(name, ok, detail)`` in ``RESULTS``; ``conftest.py``
prints them as a pass/fail block at the end of the run.
"""
import json
import time

import numpy as np
import pytest

import oracles
from fixtures import chair_cloud, margin_embeddings, random_instance_pair, random_meshes, random_rigid, two_blobs
from hierparts import formats
from hierparts.align import best_alignment, dump_transform, icp_point_to_point, rotation_angle
from hierparts.cli import build_parser, main
from hierparts.gradcheck import DIMS, KERNELS, KS, gradient_suite
from hierparts.hier_infer import bottom_up_project
from hierparts.instances import MeanShiftParams, mean_shift
from hierparts.losses import ALPHA_PRESETS, DiscriminativeParams, SepParams
from hierparts.metrics import instance_metrics, semantic_metrics
from hierparts.taxonomy import collapse_trivial_paths, dump_taxonomy, prune_by_occurrence
from hierparts.voxelgrid import RESOLUTIONS, transfer_labels, voxelize_mesh

RESULTS = []


def record(name, ok, detail):
    RESULTS.append((name, bool(ok), detail))
    assert ok, f"{name}: {detail}"


def run(*argv):
    return main([str(a) for a in argv])


def test_gradient_suite():
    t0 = time.perf_counter()
    res = gradient_suite(20)
    dt = time.perf_counter() - t0
    worst = max(r[3] for rows in res.values() for r in rows)
    combos = {(r[1], r[2]) for rows in res.values() for r in rows}
    ok = (set(res) == set(KERNELS) and all(len(r) == 20 for r in res.values())
          and combos == {(d, k) for d in DIMS for k in KS} and worst < 1e-5 and dt < 10)
    record("gradient suite", ok, f"4 kernels x 20 seeds, max rel err {worst:.2e}, {dt:.1f} s")


def test_margin_property():
    p = DiscriminativeParams()
    rng = np.random.default_rng(0)
    bad_terms = bad_points = total = 0
    for _ in range(50):
        k = int(rng.integers(2, 6))
        dim = int(rng.choice([2, 8, 32]))
        emb, ids, _ = margin_embeddings(rng, k, dim, p.delta_v, p.delta_d)
        pull, push, _ = oracles.discriminative_terms(emb, ids, p.delta_v, p.delta_d)
        bad_terms += (pull != 0) + (push != 0)
        labels = np.unique(ids)
        # centroids are computed from the points themselves
        mus = np.array([emb[ids == i].mean(axis=0) for i in labels])
        nearest = labels[np.argmin(np.linalg.norm(emb[:, None] - mus[None], axis=2), axis=1)]
        bad_points += int(np.sum(nearest != ids))
        total += len(ids)
    ok = p.delta_d > 2 * p.delta_v and bad_terms == 0 and bad_points == 0
    record("margin property", ok, f"50 constructions, {total - bad_points}/{total} points nearest own centroid")


def test_constants():
    parser = build_parser()
    cluster = parser.parse_args(["cluster", "--emb", "e", "--pred", "p"])
    inst = parser.parse_args(["eval", "instance", "--pred", "p", "--gt", "g", "--taxonomy", "t"])
    gen = parser.parse_args(["gen", "--out-dir", "x"])
    vox = parser.parse_args(["voxelize", "--meshes", "m"])
    d, s = DiscriminativeParams(), SepParams()
    table = {"base-coarse": (1, 0, 0), "base-middle": (0, 1, 0), "base-fine": (0, 0, 1),
             "mtt-12": (0.5, 0.5, 0), "mtt-123-coarse": (0.7, 0.2, 0.1), "mtt-123-fine": (0.1, 0.2, 0.7)}
    presets_ok = all(tuple(ALPHA_PRESETS[k]) == tuple(float(x) for x in v) for k, v in table.items())
    loss_presets = {name: parser.parse_args(["loss", "eval", "--alpha", name]).alpha for name in table}
    cli_ok = all(tuple(loss_presets[k]) == tuple(float(x) for x in v) for k, v in table.items())
    checks = {
        "alpha=beta=1": d.alpha == 1.0 and d.beta == 1.0,
        "gamma=0.001": d.gamma == 0.001,
        "alpha_reg=alpha_sep=1e-3": s.alpha_reg == 1e-3 and s.alpha_sep == 1e-3,
        "ap iou 0.5": inst.iou_threshold == 0.5,
        "confidence 0.25": cluster.min_confidence == 0.25,
        "resolutions": tuple(RESOLUTIONS) == (0.02, 0.05) and gen.resolution == vox.resolution == 0.05,
        "presets": presets_ok and cli_ok,
    }
    failed = [k for k, v in checks.items() if not v]
    record("constants", not failed, "all wired" if not failed else f"mismatch: {failed}")


def test_icp_recovery():
    src = chair_cloud(200)
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_rot = worst_shift = 0.0
    single_failures = 0
    for _ in range(50):
        T = random_rigid(rng)
        dst = T.apply(src)
        est, _ = best_alignment(src, dst)
        worst_rot = max(worst_rot, rotation_angle(est.linear.T @ T.linear))
        worst_shift = max(worst_shift, float(np.linalg.norm(est.translation - T.translation)))
        one, _ = icp_point_to_point(src, dst)
        single_failures += rotation_angle(one.linear.T @ T.linear) > 2e-2
    dt = time.perf_counter() - t0
    ok = worst_rot < 2e-2 and worst_shift < 1e-3 and single_failures >= 1 and dt < 30
    record("icp recovery", ok, f"50 transforms, max rot err {worst_rot:.1e} rad, max shift err "
                               f"{worst_shift:.1e} m, single-start failures {single_failures}, {dt:.1f} s")


def test_taxonomy_algebra():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    failures = 0
    for _ in range(200):
        tax = oracles.random_taxonomy(rng, int(rng.integers(1, 51)))
        t1, t2 = sorted(int(x) for x in rng.integers(0, 3000, 2))
        once = prune_by_occurrence(tax, t2)
        failures += prune_by_occurrence(once, t2).nodes != once.nodes
        failures += not set(once.nodes) <= set(prune_by_occurrence(tax, t1).nodes)
        c = collapse_trivial_paths(tax)
        failures += collapse_trivial_paths(c).nodes != c.nodes
        failures += c.leaves != tax.leaves
        for leaf in tax.leaves:
            for k in range(1, tax.max_depth + 1):
                for j in range(1, k + 1):
                    failures += tax.project(tax.project(leaf, k), j) != tax.project(leaf, j)
    dt = time.perf_counter() - t0
    record("taxonomy algebra", failures == 0 and dt < 5, f"200 trees, {failures} failures, {dt:.2f} s")


def _transfer_case(rng):
    meshes = random_meshes(rng)
    origin = rng.uniform(-0.05, 0.05, 3)
    scene = transfer_labels(voxelize_mesh(meshes, 0.05, origin=origin), meshes)
    votes = oracles.majority_votes(scene.keys, 0.05, origin, meshes)
    got = zip(scene.keys.tolist(), scene.leaf_label.tolist(), scene.instance_id.tolist(),
              scene.object_id.tolist())
    return len(scene) <= 500 and all((l, i, o) == votes.get(tuple(k), (0, 0, 0)) for k, l, i, o in got)


def _bottom_up_case(rng):
    tax = oracles.random_taxonomy(rng, int(rng.integers(2, 30)))
    n = int(rng.integers(1, 100))
    p = rng.dirichlet(np.ones(len(tax.leaves)), size=n)
    k = int(rng.integers(1, tax.max_depth + 2))
    expected, _ = oracles.bottom_up(oracles.parent_map(tax), tax.leaves, p, k)
    return np.abs(bottom_up_project(p, tax, k) - expected).max() <= 1e-12


def _close(a, b):
    return (np.isnan(a) and np.isnan(b)) or abs(a - b) <= 1e-12


def _semantic_case(rng):
    classes = sorted(int(c) for c in rng.choice(np.arange(1, 20), int(rng.integers(1, 6)), replace=False))
    n = int(rng.integers(1, 501))
    pool = np.array([0] + classes)
    pred, gt = rng.choice(pool, n), rng.choice(pool, n)
    r = semantic_metrics(pred, gt, classes)
    conf, iou, acc = oracles.semantic(pred.tolist(), gt.tolist(), classes)
    axis = [0] + classes
    cm_ok = all(r.confusion[i, j] == conf[(g, q)] for i, g in enumerate(axis) for j, q in enumerate(axis))
    return cm_ok and all(_close(r.iou[c], iou[c]) and _close(r.acc[c], acc[c]) for c in classes)


def _ap_case(rng):
    pred, gt = random_instance_pair(rng)
    r = instance_metrics(pred, gt)
    return all(_close(row["ap"], oracles.ap_exhaustive([p for p in pred if p.class_id == c],
                                                       [g for g in gt if g.class_id == c], 0.5))
               for c, row in r.per_class.items())


def test_oracle_equivalence():
    rng = np.random.default_rng(11)
    cases = {"transfer": _transfer_case, "bottom-up": _bottom_up_case,
             "confusion/iou/acc": _semantic_case, "instance ap": _ap_case}
    n = 100
    passed = {name: sum(bool(fn(rng)) for _ in range(n)) for name, fn in cases.items()}
    detail = ", ".join(f"{k} {v}/{n}" for k, v in passed.items())
    record("oracle equivalence", all(v == n for v in passed.values()), detail)


def test_mean_shift_separation():
    params = MeanShiftParams()
    bad = []
    for seed in range(20):
        X, truth = two_blobs(np.random.default_rng(seed), params.bandwidth)
        labels = mean_shift(X, params)
        same = (labels[:, None] == labels[None]) == (truth[:, None] == truth[None])
        if len(np.unique(labels)) != 2 or not same.all():
            bad.append(seed)
    record("mean-shift separation", not bad, f"20 seeds, failing {bad}" if bad else "20/20 seeds give 2 pure clusters")


def test_end_to_end(tmp_path):
    t0 = time.perf_counter()
    tax, meshes = tmp_path / "taxonomy.json", tmp_path / "meshes.json"
    vox, lab = tmp_path / "vox.s2p", tmp_path / "gt.s2p"
    steps = [run("gen", "--seed", 0, "--out-dir", tmp_path),
             run("voxelize", "--meshes", meshes, "--resolution", 0.05, "--out", vox),
             run("transfer", "--scene", vox, "--meshes", meshes, "--drop-background", "--out", lab)]
    depth = formats.read("taxonomy", tax).max_depth
    preds = []
    for k in range(1, depth + 1):
        scores, pred = tmp_path / f"scores{k}.tsv", tmp_path / f"pred{k}.tsv"
        steps.append(run("export", "scores", "--scene", lab, "--taxonomy", tax, "--level", k, "--out", scores))
        steps.append(run("infer", "flat", "--scores", scores, "--taxonomy", tax, "--out", pred))
        preds.append(pred)
    hier = tmp_path / "hier.json"
    argv = ["eval", "hier", "--gt", lab, "--taxonomy", tax, "--out", hier]
    for p in preds:
        argv += ["--pred", p]
    steps.append(run(*argv))
    emb, labels, inst, ap = (tmp_path / n for n in ("emb.tsv", "labels.tsv", "inst.tsv", "ap.json"))
    steps += [run("export", "emb", "--scene", lab, "--taxonomy", tax, "--out", emb),
              run("export", "labels", "--scene", lab, "--taxonomy", tax, "--out", labels),
              run("cluster", "--emb", emb, "--pred", labels, "--out", inst),
              run("eval", "instance", "--pred", inst, "--gt", lab, "--taxonomy", tax, "--out", ap)]
    dt = time.perf_counter() - t0
    levels = json.loads(hier.read_text())["levels"] if hier.exists() else []
    ap50 = json.loads(ap.read_text())["ap"] if ap.exists() else float("nan")
    per_level = [(r["miou"], r["macc"]) for r in levels]
    ok = (all(s == 0 for s in steps) and depth == 3 and len(levels) == 3
          and all(v == (1.0, 1.0) for v in per_level) and ap50 == 1.0 and dt < 60)
    record("end-to-end", ok, f"(mIoU, mAcc) per level {per_level}, AP@50 {ap50}, {dt:.1f} s")


def test_format_roundtrip(tmp_path):
    tax, gt = tmp_path / "taxonomy.json", tmp_path / "scene.s2p"
    assert run("gen", "--seed", 5, "--out-dir", tmp_path) == 0
    files = {"scene": gt, "meshes": tmp_path / "meshes.json", "taxonomy": tax}
    for kind, name, extra in [("tensor", "scores.tsv", ["scores", "--level", 2]),
                              ("tensor", "emb.tsv", ["emb"]),
                              ("prediction", "labels.tsv", ["labels"]),
                              ("instances", "inst.tsv", ["instances"])]:
        assert run("export", extra[0], "--scene", gt, "--taxonomy", tax, *extra[1:], "--out", tmp_path / name) == 0
        files[f"{kind}:{name}"] = tmp_path / name
    src = chair_cloud()
    files["points"] = tmp_path / "cloud.xyz"
    files["points"].write_text(formats.dump_points(src))
    (tmp_path / "moved.xyz").write_text(formats.dump_points(random_rigid(np.random.default_rng(1)).apply(src)))
    assert run("align", "best", "--source", files["points"], "--target", tmp_path / "moved.xyz",
               "--out", tmp_path / "t.json") == 0
    files["transform"] = tmp_path / "t.json"
    dumpers = {"scene": formats.dump_scene, "points": formats.dump_points, "meshes": formats.dump_meshes,
               "tensor": formats.dump_tensor, "prediction": formats.dump_prediction,
               "instances": formats.dump_instances, "taxonomy": dump_taxonomy, "transform": dump_transform}
    bad = []
    for label, path in files.items():
        kind = label.split(":")[0]
        obj = formats.read(kind, path)
        text = dumpers[kind](*obj) if kind == "meshes" else dumpers[kind](obj)
        if text != path.read_text():
            bad.append(label)
    record("format round-trip", not bad, f"{len(files)} files byte-identical" if not bad else f"differ: {bad}")
