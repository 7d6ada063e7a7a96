"""``hierparts`` command line.

Exit status: 0 on success, 1 on invalid input (bad flags, malformed or
inconsistent files), 2 when a file cannot be read or written.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import formats
from .align import best_alignment, dump_transform, icp_point_to_point
from .formats import FormatError, KeyedLabels, KeyedTensor
from .gradcheck import KERNELS, gradient_suite
from .hier_infer import bottom_up_project, flat_predict, top_down_chain, top_down_predict
from .instances import MIN_CONFIDENCE, MeanShiftParams, extract_instances, instances_from_labels, mean_shift
from .losses import ALPHA_PRESETS, inverse_frequency_weights, instance_total_loss, parse_alpha, weighted_cross_entropy
from .metrics import (AP_IOU_THRESHOLD, SemanticReport, align_by_keys, dump_report, hierarchical_summary,
                      instance_metrics, report_table, semantic_metrics)
from .synthetic import make_spec, gen_synthetic
from .taxonomy import (collapse_trivial_paths, count_occurrences, dump_taxonomy, level_classes,
                       prune_by_occurrence, relabel_pruned)
from .voxelgrid import DEFAULT_RESOLUTION, remove_background, transfer_labels, voxelize_mesh, project_scene_labels


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _alpha(text):
    try:
        return parse_alpha(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected a1,a2,a3 or one of {', '.join(ALPHA_PRESETS)}") from None


def _positive(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _out(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        formats.write(path, text)


def _load_pred(path, scene, tax, level):
    """Prediction labels aligned to ``scene.keys``: a prediction file or a scene."""
    if str(path).endswith(".s2p"):
        other = formats.read("scene", path)
        labels = project_scene_labels(other, tax, level)
        return align_by_keys(other.keys, labels, scene.keys)
    pred = formats.read("prediction", path)
    if pred.level != level:
        raise FormatError(f"prediction is for level {pred.level}, expected {level}", str(path))
    return align_by_keys(pred.keys, pred.labels, scene.keys)


def _names(tax, classes):
    return {c: tax.name(c) for c in classes}


# --- subcommands --------------------------------------------------------------

def cmd_taxonomy(a):
    tax = formats.read("taxonomy", a.taxonomy)
    if a.action == "levels":
        info = {str(k): [{"id": c, "name": tax.name(c)} for c in level_classes(tax, k)]
                for k in range(1, tax.max_depth + 1)}
        _out(a.out, json.dumps(info, indent=1) + "\n")
        return 0
    if a.action == "collapse":
        _out(a.out, dump_taxonomy(collapse_trivial_paths(tax)))
        return 0
    scene = formats.read("scene", a.scene) if a.scene else None
    if scene is not None:
        tax = count_occurrences(tax, scene)
    pruned = prune_by_occurrence(tax, a.threshold)
    _out(a.out, dump_taxonomy(pruned))
    if a.scene_out:
        if scene is None:
            raise UsageError("--scene-out needs --scene")
        leaf = relabel_pruned(scene.leaf_label, pruned, tax, a.prune_relabel)
        inst = np.where(leaf > 0, scene.instance_id, 0)
        formats.write(a.scene_out, formats.dump_scene(scene.with_labels(leaf, inst)))
    return 0


def cmd_align(a):
    src = formats.read("points", a.source)
    dst = formats.read("points", a.target)
    if a.action == "icp":
        T, rmse = icp_point_to_point(src, dst)
    else:
        T, rmse = best_alignment(src, dst, score=a.icp_score, threads=a.threads or os.cpu_count() or 1)
    _out(a.out, dump_transform(T))
    print(f"rmse {rmse!r}", file=sys.stderr)
    return 0


def cmd_voxelize(a):
    meshes, poses = formats.read("meshes", a.meshes)
    scene = voxelize_mesh(formats.placed_meshes(meshes, poses), a.resolution, a.truncation)
    _out(a.out, formats.dump_scene(scene))
    return 0


def cmd_transfer(a):
    scene = formats.read("scene", a.scene)
    meshes, poses = formats.read("meshes", a.meshes)
    scene = transfer_labels(scene, formats.placed_meshes(meshes, poses), sample_faces=a.sample_faces)
    if a.drop_background:
        scene = remove_background(scene)
    _out(a.out, formats.dump_scene(scene))
    return 0


def cmd_infer(a):
    tax = formats.read("taxonomy", a.taxonomy)
    tensors = [formats.read("tensor", p) for p in a.scores]
    for t, p in zip(tensors, a.scores):
        if t.field != "score":
            raise FormatError("expected a score tensor", p)
    if a.action == "flat":
        t = tensors[-1]
        labels = flat_predict(t.values, level_classes(tax, t.level))
        level = t.level
    elif a.action == "bottomup":
        t = tensors[-1]
        if a.level is None:
            raise UsageError("infer bottomup needs --level")
        labels = flat_predict(bottom_up_project(t.values, tax, a.level), level_classes(tax, a.level))
        level = a.level
    else:
        if a.predicted_parent:
            keys = tensors[0].keys
            if any(not np.array_equal(t.keys, keys) for t in tensors):
                raise FormatError("score tensors cover different voxels", a.scores[-1])
            labels = top_down_chain([t.values for t in tensors], tax)[-1]
            level = len(tensors)
        else:
            if not a.parent:
                raise UsageError("infer topdown needs --parent (or --predicted-parent)")
            t = tensors[-1]
            parent = formats.read("prediction", a.parent)
            labels = top_down_predict(t.values, align_by_keys(parent.keys, parent.labels, t.keys), tax, t.level)
            level = t.level
    _out(a.out, formats.dump_prediction(KeyedLabels(level, tensors[-1].keys, labels)))
    return 0


def cmd_cluster(a):
    emb = formats.read("tensor", a.emb)
    sem = formats.read("prediction", a.pred)
    sem_labels = align_by_keys(sem.keys, sem.labels, emb.keys)
    clusters = mean_shift(emb.values, MeanShiftParams(bandwidth=a.bandwidth), keys=emb.keys)
    inst = extract_instances(clusters, sem_labels, a.min_confidence, keys=emb.keys)
    _out(a.out, formats.dump_instances(inst))
    return 0


def cmd_loss(a):
    if a.action == "gradcheck":
        kernels = KERNELS if a.all or not a.kernel else tuple(a.kernel)
        res = gradient_suite(a.seeds, a.seed or 0, kernels)
        ok = True
        for name, rows in res.items():
            worst = max(r[3] for r in rows)
            ok &= worst < a.tolerance
            print(f"{name}\tseeds={len(rows)}\tmax_rel_err={worst:.3e}\t{'pass' if worst < a.tolerance else 'FAIL'}")
        return 0 if ok else 1
    if not (a.scene and a.taxonomy):
        raise UsageError("loss eval needs --scene and --taxonomy")
    scene = formats.read("scene", a.scene)
    tax = formats.read("taxonomy", a.taxonomy)
    out = {}
    if a.scores:
        tensors = sorted((formats.read("tensor", p) for p in a.scores), key=lambda t: t.level)
        alpha = a.alpha if a.alpha is not None else (1.0,) * len(tensors)
        if len(alpha) != len(tensors):
            raise UsageError(f"--alpha has {len(alpha)} weights for {len(tensors)} score files")
        scores, labels, weights = [], [], []
        for t in tensors:
            classes = level_classes(tax, t.level)
            col = {c: i + 1 for i, c in enumerate(classes)}
            gt = project_scene_labels(scene, tax, t.level)
            y = np.array([col.get(int(v), 0) for v in gt], dtype=np.int64)
            scores.append(align_by_keys(t.keys, t.values, scene.keys))
            labels.append(y)
            weights.append(inverse_frequency_weights(y, len(classes)) if a.class_weights else None)
        out["cross_entropy"], _ = weighted_cross_entropy(scores, labels, alpha, weights)
    if a.emb:
        t = formats.read("tensor", a.emb)
        e = align_by_keys(t.keys, t.values, scene.keys)
        fg = scene.instance_id > 0
        if fg.any():
            loss, comp, _ = instance_total_loss(e[fg], scene.instance_id[fg], e[~fg])
            out["instance"] = loss
            out.update(comp)
    _out(a.out, json.dumps(out, indent=1, sort_keys=True) + "\n")
    return 0


def _semantic(a, tax, scene, pred_path, level):
    gt = project_scene_labels(scene, tax, level)
    pred = _load_pred(pred_path, scene, tax, level)
    classes = level_classes(tax, level)
    return semantic_metrics(pred, gt, classes, a.balanced_binary, level, _names(tax, classes))


def cmd_eval(a):
    tax = formats.read("taxonomy", a.taxonomy)
    scene = formats.read("scene", a.gt)
    if a.action == "semantic":
        level = a.level or tax.max_depth
        rep = _semantic(a, tax, scene, a.pred[0], level)
        _out(a.out, dump_report(rep))
        if a.csv:
            formats.write(a.csv, report_table({"pred": rep}))
        return 0
    if a.action == "hier":
        if len(a.pred) == 1 and a.pred[0].endswith(".s2p"):
            preds = a.pred * tax.max_depth
        else:
            preds = a.pred
        reps = [_semantic(a, tax, scene, p, k) for k, p in enumerate(preds, start=1)]
        data = {"levels": [r.to_dict() for r in reps], "mean_miou": hierarchical_summary(reps)}
        _out(a.out, dump_report(data))
        if a.csv:
            formats.write(a.csv, report_table({f"d{r.level}": r for r in reps}))
        return 0
    level = a.level or tax.max_depth
    gt = instances_from_labels(scene.instance_id, project_scene_labels(scene, tax, level), scene.keys)
    path = a.pred[0]
    if path.endswith(".s2p"):
        other = formats.read("scene", path)
        pred = instances_from_labels(other.instance_id, project_scene_labels(other, tax, level), other.keys)
    else:
        pred = formats.read("instances", path)
    pred = type(pred)(tuple(p for p in pred if p.confidence >= a.min_confidence))
    _out(a.out, dump_report(instance_metrics(pred, gt, a.iou_threshold)))
    return 0


def cmd_gen(a):
    categories = a.categories.split(",") if a.categories else None
    spec = make_spec(a.seed, categories, a.objects, a.resolution, a.truncation, not a.no_floor)
    meshes, poses, tax, scene = gen_synthetic(spec)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    formats.write(out / "meshes.json", formats.dump_meshes(meshes, poses))
    formats.write(out / "taxonomy.json", dump_taxonomy(tax))
    formats.write(out / "scene.s2p", formats.dump_scene(scene))
    return 0


def cmd_export(a):
    """Ground-truth fields of a scene in the prediction, tensor and instance formats."""
    scene = formats.read("scene", a.scene)
    tax = formats.read("taxonomy", a.taxonomy)
    level = a.level or tax.max_depth
    labels = project_scene_labels(scene, tax, level)
    if a.what == "labels":
        text = formats.dump_prediction(KeyedLabels(level, scene.keys, labels))
    elif a.what == "scores":
        classes = level_classes(tax, level)
        col = {c: i for i, c in enumerate(classes)}
        onehot = np.zeros((len(scene), len(classes)))
        rows = np.flatnonzero(labels > 0)
        onehot[rows, [col[int(v)] for v in labels[rows]]] = 1.0
        text = formats.dump_tensor(KeyedTensor("score", level, scene.keys, onehot))
    elif a.what == "probs":
        leaves = tax.leaves
        col = {c: i for i, c in enumerate(leaves)}
        probs = np.full((len(scene), len(leaves)), 1.0 / len(leaves))
        rows = np.flatnonzero(scene.leaf_label > 0)
        probs[rows] = 0.0
        probs[rows, [col[int(v)] for v in scene.leaf_label[rows]]] = 1.0
        text = formats.dump_tensor(KeyedTensor("score", tax.max_depth, scene.keys, probs))
    elif a.what == "emb":
        ids, inv = np.unique(scene.instance_id, return_inverse=True)
        emb = np.zeros((len(scene), len(ids)))
        emb[np.arange(len(scene)), inv.ravel()] = a.spread
        text = formats.dump_tensor(KeyedTensor("emb", 0, scene.keys, emb))
    else:
        text = formats.dump_instances(instances_from_labels(scene.instance_id, labels, scene.keys))
    _out(a.out, text)
    return 0


def _report_from_json(data) -> SemanticReport:
    nan = float("nan")
    conv = lambda d: {int(k): (nan if v is None else v) for k, v in d.items()}  # noqa: E731
    return SemanticReport(
        classes=[int(c) for c in data["classes"]], confusion=np.asarray(data["confusion"]),
        iou=conv(data["iou"]), acc=conv(data["acc"]),
        miou=nan if data["miou"] is None else data["miou"],
        macc=nan if data["macc"] is None else data["macc"],
        n_classes=data["n_classes"], level=data.get("level"),
        names={int(k): v for k, v in data.get("names", {}).items()})


def cmd_report(a):
    names = a.names.split(",") if a.names else [Path(p).stem for p in a.input]
    if len(names) != len(a.input):
        raise UsageError("--names needs one name per --input")
    reports = {}
    for name, path in zip(names, a.input):
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            reports[name] = _report_from_json(data)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"not a semantic report: {exc}", str(path)) from None
    _out(a.out, report_table(reports))
    return 0


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hierparts", description="Hierarchical part segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("taxonomy", help="prune, collapse or list levels of a part taxonomy")
    t.add_argument("action", choices=("prune", "collapse", "levels"))
    t.add_argument("--taxonomy", required=True)
    t.add_argument("--threshold", type=int, default=0)
    t.add_argument("--scene", help="recount occurrences from this scene before pruning")
    t.add_argument("--scene-out", help="write the scene relabelled against the pruned taxonomy")
    t.add_argument("--prune-relabel", choices=("parent", "unlabeled"), default="unlabeled")
    t.add_argument("--out")
    t.set_defaults(func=cmd_taxonomy)

    al = sub.add_parser("align", help="rigidly align two point clouds")
    al.add_argument("action", choices=("icp", "best"))
    al.add_argument("--source", required=True)
    al.add_argument("--target", required=True)
    al.add_argument("--icp-score", choices=("rmse", "sum"), default="rmse")
    al.add_argument("--threads", type=int, default=None)
    al.add_argument("--out")
    al.set_defaults(func=cmd_align)

    v = sub.add_parser("voxelize", help="voxelize meshes into an unlabeled scene")
    v.add_argument("--meshes", required=True)
    v.add_argument("--resolution", type=_positive, default=DEFAULT_RESOLUTION)
    v.add_argument("--truncation", type=_positive, default=None)
    v.add_argument("--out")
    v.set_defaults(func=cmd_voxelize)

    tr = sub.add_parser("transfer", help="transfer mesh labels onto scene voxels")
    tr.add_argument("--scene", required=True)
    tr.add_argument("--meshes", required=True)
    tr.add_argument("--sample-faces", action="store_true")
    tr.add_argument("--drop-background", action="store_true")
    tr.add_argument("--out")
    tr.set_defaults(func=cmd_transfer)

    i = sub.add_parser("infer", help="labels from score tensors")
    i.add_argument("action", choices=("flat", "topdown", "bottomup"))
    i.add_argument("--scores", action="append", required=True)
    i.add_argument("--taxonomy", required=True)
    i.add_argument("--level", type=int)
    i.add_argument("--parent")
    i.add_argument("--predicted-parent", action="store_true")
    i.add_argument("--out")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("cluster", help="mean-shift instances from embeddings")
    c.add_argument("--emb", required=True)
    c.add_argument("--pred", required=True)
    c.add_argument("--bandwidth", type=_positive, default=MeanShiftParams().bandwidth)
    c.add_argument("--min-confidence", type=float, default=MIN_CONFIDENCE)
    c.add_argument("--out")
    c.set_defaults(func=cmd_cluster)

    lo = sub.add_parser("loss", help="evaluate losses or check their gradients")
    lo.add_argument("action", choices=("eval", "gradcheck"))
    lo.add_argument("--scene")
    lo.add_argument("--taxonomy")
    lo.add_argument("--scores", action="append")
    lo.add_argument("--emb")
    lo.add_argument("--alpha", type=_alpha, default=None)
    lo.add_argument("--class-weights", action="store_true")
    lo.add_argument("--all", action="store_true")
    lo.add_argument("--kernel", action="append", choices=KERNELS)
    lo.add_argument("--seeds", type=int, default=20)
    lo.add_argument("--seed", type=int, default=0)
    lo.add_argument("--tolerance", type=float, default=1e-5)
    lo.add_argument("--out")
    lo.set_defaults(func=cmd_loss)

    e = sub.add_parser("eval", help="semantic, hierarchical or instance metrics")
    e.add_argument("action", choices=("semantic", "hier", "instance"))
    e.add_argument("--pred", action="append", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--taxonomy", required=True)
    e.add_argument("--level", type=int)
    e.add_argument("--balanced-binary", action="store_true")
    e.add_argument("--iou-threshold", type=float, default=AP_IOU_THRESHOLD)
    e.add_argument("--min-confidence", type=float, default=MIN_CONFIDENCE)
    e.add_argument("--csv")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gen", help="write a seeded synthetic scene")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--objects", type=int, default=4)
    g.add_argument("--categories", help="comma-separated chair|table|storage list")
    g.add_argument("--resolution", type=_positive, default=DEFAULT_RESOLUTION)
    g.add_argument("--truncation", type=_positive, default=None)
    g.add_argument("--no-floor", action="store_true")
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen)

    x = sub.add_parser("export", help="write a scene's ground truth as labels, scores, embeddings or instances")
    x.add_argument("what", choices=("labels", "scores", "probs", "emb", "instances"))
    x.add_argument("--scene", required=True)
    x.add_argument("--taxonomy", required=True)
    x.add_argument("--level", type=int)
    x.add_argument("--spread", type=_positive, default=5.0)
    x.add_argument("--out")
    x.set_defaults(func=cmd_export)

    r = sub.add_parser("report", help="combine semantic reports into a CSV table")
    r.add_argument("--input", action="append", required=True)
    r.add_argument("--names")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
