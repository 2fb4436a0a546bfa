"""Command-line interface.

Subcommands: generate, train, predict, eval, ablate. All configs are JSON;
tables are CSV and plots SVG. Exit code is 0 on success; failures print a
machine-readable error JSON to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import ClusterConfig, InstanceDetection, detections_from_heads
from .dataset_io import read_dataset, write_dataset
from .evaluation import EvalConfig, evaluate, gt_instances_from_sample
from .harness import (
    ClusteringSwapSpec,
    DimSweepSpec,
    GtLayerSpec,
    SemanticSwapSpec,
    run_clustering_gt_swap,
    run_dim_sweep,
    run_gt_layer_ablation,
    run_semantic_gt_swap,
)
from .losses import LossConfig
from .net import (
    NetConfig,
    StreamingShapes,
    TrainConfig,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_log,
)
from .oracle import oracle_predict
from .rle import rle_decode, rle_encode
from .scenegen import SceneConfig, generate_dataset

PREDICTIONS_VERSION = 1


def _config_from_dict(cls, data: dict, tuple_fields=()):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = dict(data)
    for name in tuple_fields:
        if name in kwargs:
            kwargs[name] = tuple(kwargs[name])
    return cls(**kwargs)


def scene_config_from_dict(data: dict) -> SceneConfig:
    return _config_from_dict(SceneConfig, data, tuple_fields=("classes",))


def _load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def cmd_generate(args) -> int:
    spec = _load_json(args.config)
    config = scene_config_from_dict(spec["scene"])
    num_samples = int(spec["num_samples"])
    samples = generate_dataset(config, num_samples)
    write_dataset(samples, config, args.out)
    print(f"wrote {num_samples} samples to {args.out}")
    return 0


def _net_config(spec: dict, scene: SceneConfig) -> NetConfig:
    data = dict(spec.get("net", {}))
    data.setdefault("num_classes", scene.num_classes)
    data.setdefault("canvas_size", scene.canvas_size)
    data.setdefault("label_size", scene.label_size)
    return _config_from_dict(NetConfig, data, tuple_fields=("trunk_widths", "head_widths"))


def cmd_train(args) -> int:
    spec = _load_json(args.config)
    loss_config = _config_from_dict(LossConfig, spec.get("loss", {}))
    train_config = _config_from_dict(TrainConfig, spec.get("train", {}))
    if args.data:
        scene, samples = read_dataset(args.data)
        data = samples
    elif "stream" in spec:
        scene = scene_config_from_dict(spec["stream"]["scene"])
        data = StreamingShapes(scene, train_config.samples_per_epoch)
    else:
        raise ValueError("either --data or a 'stream' section in the config is required")
    net_config = _net_config(spec, scene)
    params = init_params(net_config, seed=int(spec.get("init_seed", train_config.seed)))
    params, log = train(params, data, loss_config, train_config)
    save_checkpoint(params, args.out)
    log_path = args.log or (str(args.out) + ".losslog.csv")
    write_loss_log(log, log_path)
    print(f"checkpoint written to {args.out}; loss log at {log_path}")
    return 0


def detections_to_json(sample_index: int, detections) -> dict:
    return {
        "format_version": PREDICTIONS_VERSION,
        "sample_index": sample_index,
        "detections": [
            {
                "instance_id": int(d.instance_id),
                "class_id": int(d.class_id),
                "score": float(d.score),
                "fg_rle": rle_encode(d.fg_mask),
                "occ_rle": rle_encode(d.occ_mask),
            }
            for d in detections
        ],
    }


def detections_from_json(obj: dict) -> list[InstanceDetection]:
    if obj.get("format_version") != PREDICTIONS_VERSION:
        raise ValueError(f"unsupported predictions version {obj.get('format_version')!r}")
    out = []
    for d in obj["detections"]:
        fg = rle_decode(d["fg_rle"])
        occ = rle_decode(d["occ_rle"])
        out.append(InstanceDetection(
            instance_id=int(d["instance_id"]), class_id=int(d["class_id"]),
            fg_mask=fg, occ_mask=occ, amodal_mask=fg | occ,
            score=float(d["score"]),
        ))
    return out


def _colorize(labels: np.ndarray) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(12345))
    palette = rng.integers(40, 255, size=(int(labels.max()) + 1, 3), dtype=np.uint16)
    palette[0] = 0
    return palette[labels.astype(np.int64)].astype(np.uint8)


def cmd_predict(args) -> int:
    from PIL import Image

    params = load_checkpoint(args.ckpt)
    _, samples = read_dataset(args.data)
    cluster_config = (_config_from_dict(ClusterConfig, _load_json(args.cluster_config))
                      if args.cluster_config else ClusterConfig())
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    for idx, sample in enumerate(samples):
        outputs = forward(params, [sample.rendered.image])
        single = {k: v[0] for k, v in outputs.items()}
        detections = detections_from_heads(single, cluster_config)
        sdir = out_root / str(idx)
        sdir.mkdir(exist_ok=True)
        (sdir / "detections.json").write_text(
            json.dumps(detections_to_json(idx, detections), sort_keys=True) + "\n"
        )
        if args.viz:
            fg_sem = single["fg_semantic"].argmax(axis=-1)
            label_img = np.zeros(fg_sem.shape, dtype=np.int64)
            for d in detections:
                label_img[d.fg_mask] = d.instance_id + 1
            Image.fromarray(_colorize(label_img)).save(sdir / "fg_labels.png")
            Image.fromarray(_colorize(fg_sem)).save(sdir / "fg_semantic.png")
    print(f"predictions for {len(samples)} samples written to {out_root}")
    return 0


def cmd_eval(args) -> int:
    _, samples = read_dataset(args.data)
    pred_root = Path(args.pred)
    predictions = []
    for idx in range(len(samples)):
        pfile = pred_root / str(idx) / "detections.json"
        if not pfile.exists():
            raise FileNotFoundError(f"missing predictions for sample {idx}: {pfile}")
        obj = json.loads(pfile.read_text())
        if obj.get("sample_index") != idx:
            raise ValueError(f"{pfile} carries sample_index {obj.get('sample_index')}, "
                             f"expected {idx}")
        predictions.append(detections_from_json(obj))
    gts = [gt_instances_from_sample(s) for s in samples]
    eval_config = (_config_from_dict(EvalConfig, _load_json(args.eval_config),
                                     tuple_fields=("iou_thresholds",))
                   if args.eval_config else EvalConfig())
    report = evaluate(predictions, gts, eval_config)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    csv_path = report_path.with_suffix(".csv")
    header = ["AP", "AP50", "AP75", "AR100", "AR_None", "AR_Partial", "AR_Heavy"]
    d = report.to_dict()
    csv_path.write_text(
        ",".join(header) + "\n" +
        ",".join("" if d[h] is None else f"{d[h]:.4f}" for h in header) + "\n"
    )
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def _unwrap_spec(spec: dict, kind: str) -> dict:
    # accept a previously written experiment manifest for bit-identical reruns
    if "spec" in spec and "kind" in spec:
        if spec["kind"] != kind:
            raise ValueError(f"manifest kind {spec['kind']!r} does not match --kind {kind!r}")
        return spec["spec"]
    return spec


def cmd_ablate(args) -> int:
    spec = _unwrap_spec(_load_json(args.spec), args.kind)
    scene = scene_config_from_dict(spec["scene"])
    out_dir = Path(args.out)
    if args.kind == "gt_layers":
        run_gt_layer_ablation(GtLayerSpec(
            scene=scene,
            num_samples=int(spec.get("num_samples", 1000)),
            layers=tuple(spec.get("layers", (2, 3))),
            instances_per_class_values=tuple(spec.get("instances_per_class_values", (6, 12))),
        ), out_dir)
    elif args.kind == "clustering_gt_swap":
        run_clustering_gt_swap(ClusteringSwapSpec(
            scene=scene, num_samples=int(spec.get("num_samples", 1000)),
        ), out_dir)
    elif args.kind == "semantic_gt_swap":
        cluster_cfg = _config_from_dict(ClusterConfig, spec.get("cluster", {}))
        if "ckpt" in spec:
            params = load_checkpoint(spec["ckpt"])

            def predictor(sample, idx):
                outputs = forward(params, [sample.rendered.image])
                return {k: v[0] for k, v in outputs.items()}
        else:
            oracle_cfg = spec.get("oracle", {})

            def predictor(sample, idx):
                return oracle_predict(
                    sample.rendered, sigma=float(oracle_cfg.get("sigma", 0.0)),
                    seed=idx, num_classes=scene.num_classes,
                    embed_dim=int(oracle_cfg.get("embed_dim", 6)),
                )
        run_semantic_gt_swap(SemanticSwapSpec(
            scene=scene, num_samples=int(spec.get("num_samples", 200)),
            cluster=cluster_cfg,
        ), predictor, out_dir)
    elif args.kind == "dim_sweep":
        run_dim_sweep(DimSweepSpec(
            scene=scene,
            num_samples=int(spec.get("num_samples", 200)),
            instance_counts=tuple(spec.get("instance_counts", (6, 12, 18, 24, 30))),
            embed_dims=tuple(spec.get("embed_dims", (1, 2, 3, 4, 5, 6))),
            sigma=float(spec.get("sigma", 0.3)),
            cluster=_config_from_dict(ClusterConfig, spec.get("cluster", {})),
            strict_lattice=bool(spec.get("strict_lattice", False)),
        ), out_dir)
    else:
        raise ValueError(f"unknown ablation kind {args.kind!r}")
    print(f"{args.kind} results written to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapelayers",
                                     description="layered amodal shapes pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the predictor")
    p.add_argument("--data", default=None)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run inference and clustering")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cluster-config", default=None)
    p.add_argument("--viz", action="store_true", help="write debug label PNGs")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against a dataset")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--eval-config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a harness experiment")
    p.add_argument("--kind", required=True,
                   choices=["gt_layers", "semantic_gt_swap", "clustering_gt_swap",
                            "dim_sweep"])
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
