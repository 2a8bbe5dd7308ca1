"""Command-line entry points: phantom generation, pre-training, ablations,
probing, embedding extraction, retrieval evaluation, the zero-shot
analytics, and the HTTP service."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import encoder as enc
from . import trainer
from .augment import TransformPipeline, default_pipeline, pipeline_from_config
from .embeddings import (EmbeddingRecord, EmbeddingStore, aggregate,
                         load_store, retrieval_metrics, save_store,
                         sliding_window_embed, topk_search)
from .objectives import ObjectiveConfig
from .sampler import BatchComposition, PatchSize
from .semantics import (heatmap_to_volume, ocd, ofd_saliency, pca_cielab_map,
                        saliency_to_volume, semantic_search, test_retest,
                        write_stability_csv)
from .volume import (OrganSpec, PhantomSpec, Volume, default_phantom_spec,
                     generate_phantom, load_mask, load_volume, save_mask,
                     save_volume)


@dataclass
class RunConfig:
    """Validated bundle of every configurable section; construction fails
    fast on any invalid nested config."""

    phantom: PhantomSpec = field(default_factory=default_phantom_spec)
    pipeline: TransformPipeline = field(default_factory=default_pipeline)
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    training: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    ablation: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)


def _phantom_from_dict(d) -> PhantomSpec:
    organs = tuple(
        OrganSpec(int(o["label"]), o["geometry"], tuple(o["center_frac"]),
                  tuple(o["radii_frac"]), float(o["mean_hu"]),
                  float(o.get("hu_jitter", 0.0)))
        for o in d.get("organs", [])
    )
    base = default_phantom_spec()
    return PhantomSpec(
        shape=tuple(d.get("shape", base.shape)),
        spacing_mm=tuple(d.get("spacing_mm", base.spacing_mm)),
        organs=organs if organs else base.organs,
        background_hu=float(d.get("background_hu", base.background_hu)),
        noise_sigma=float(d.get("noise_sigma", base.noise_sigma)),
    )


def _training_from_dict(d, pipeline) -> trainer.TrainConfig:
    obj_d = d.get("objective", {})
    comp = BatchComposition(
        int(d.get("scans_per_batch", 4)),
        int(d.get("patches_per_scan", 8)),
        PatchSize.of(d.get("patch_size", 16)),
    )
    return trainer.TrainConfig(
        epochs=int(d.get("epochs", 30)),
        steps_per_epoch=int(d.get("steps_per_epoch", 50)),
        base_lr=float(d.get("base_lr", 3e-4)),
        weight_decay=float(d.get("weight_decay", 1e-6)),
        warmup_epochs=int(d.get("warmup_epochs", 3)),
        composition=comp,
        objective=ObjectiveConfig(
            kind=obj_d.get("kind", "ntxent"),
            temperature=float(obj_d.get("temperature", 0.1)),
            lambda_inv=float(obj_d.get("lambda_inv", 25.0)),
            lambda_var=float(obj_d.get("lambda_var", 25.0)),
            lambda_cov=float(obj_d.get("lambda_cov", 1.0)),
            variance_target=float(obj_d.get("variance_target", 1.0)),
        ),
        pipeline=pipeline,
        seed=int(d.get("seed", 0)),
        checkpoint_every=int(d.get("checkpoint_every", 10)),
        intra_sample=bool(d.get("intra_sample", True)),
    )


def parse_run_config(source) -> RunConfig:
    """Parse a config file path or dict, validating every nested section."""
    if source is None:
        return RunConfig()
    if isinstance(source, (str, Path)):
        data = json.loads(Path(source).read_text())
    else:
        data = dict(source)
    pipeline = pipeline_from_config(data["pipeline"]) if "pipeline" in data \
        else default_pipeline()
    encoder_cfg = enc.EncoderConfig.from_dict(data["encoder"]) \
        if "encoder" in data else enc.EncoderConfig()
    return RunConfig(
        phantom=_phantom_from_dict(data.get("phantom", {})),
        pipeline=pipeline,
        encoder=encoder_cfg,
        training=_training_from_dict(data.get("training", {}), pipeline),
        ablation=data.get("ablation", {}),
        search=data.get("search", {}),
    )


# ---------------------------------------------------------------------------
# Data directory helpers


def load_volume_dir(directory):
    """id -> Volume for every kind:"hu" file pair in a directory."""
    directory = Path(directory)
    out = {}
    for sidecar in sorted(directory.glob("*.json")):
        try:
            meta = json.loads(sidecar.read_text())
        except json.JSONDecodeError:
            continue
        if meta.get("kind") == "hu":
            out[sidecar.stem] = load_volume(sidecar)
    if not out:
        raise FileNotFoundError(f"no volumes found in {directory}")
    return out


def load_labeled_dir(directory):
    """(Volume, SegmentationMask) pairs via the <stem>_mask convention."""
    directory = Path(directory)
    pairs = []
    for vid, vol in load_volume_dir(directory).items():
        mask_path = directory / f"{vid}_mask.json"
        if mask_path.exists():
            pairs.append((vol, load_mask(mask_path)))
    if not pairs:
        raise FileNotFoundError(f"no volume/mask pairs found in {directory}")
    return pairs


def _save_png(gray_or_rgb: np.ndarray, path) -> None:
    mode = "L" if gray_or_rgb.ndim == 2 else "RGB"
    Image.fromarray(gray_or_rgb, mode=mode).save(path, format="PNG")


# ---------------------------------------------------------------------------
# Subcommand implementations


def _cmd_phantom_gen(args):
    cfg = parse_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        vol, mask = generate_phantom(cfg.phantom, args.seed + i)
        save_volume(vol, out / f"phantom_{i:04d}")
        save_mask(mask, out / f"phantom_{i:04d}_mask")
    print(json.dumps({"written": args.count, "dir": str(out)}))
    return 0


def _cmd_pretrain(args):
    cfg = parse_run_config(args.config)
    training = cfg.training
    if args.seed is not None:
        from dataclasses import replace
        training = replace(training, seed=args.seed)
    volumes = load_volume_dir(args.data)
    result = trainer.pretrain(volumes, cfg.encoder, training, out_dir=args.out)
    final = result.loss_curve[-1]
    print(json.dumps({"steps": len(result.loss_curve),
                      "final_loss": final["loss"],
                      "checkpoints": [e for e, _ in result.checkpoints],
                      "out": str(args.out)}))
    return 0


def _cmd_ablate(args):
    cfg = parse_run_config(args.config)
    ab = cfg.ablation
    if not ab:
        print("ablate: config lacks an 'ablation' section", file=sys.stderr)
        return 1
    count = int(ab.get("phantom_count", 16))
    seed0 = args.seed if args.seed is not None else int(ab.get("seed", 0))
    pairs = [generate_phantom(cfg.phantom, seed0 + i) for i in range(count)]
    strategies = [tuple(s) for s in ab.get(
        "strategies", [["intra", "ntxent"], ["inter", "ntxent"]])]
    rows = trainer.ablate(
        pairs,
        strategies,
        [int(c) for c in ab.get("crops", [cfg.training.composition.patches_per_scan])],
        cfg.training,
        [int(s) for s in ab.get("seeds", [0, 1, 2])],
        encoder_config=cfg.encoder,
        probe_shots=int(ab.get("probe_shots", 2)),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer.write_ablation_table(rows, out / "ablation.csv")
    print(json.dumps({"rows": len(rows), "table": str(out / "ablation.csv")}))
    return 0


def _cmd_probe(args):
    state, epoch = enc.load_checkpoint(args.checkpoint)
    pairs = load_labeled_dir(args.data)
    counts = [int(c) for c in args.shots.split(",")]
    reports = trainer.probe_evaluate(state, pairs, counts,
                                     checkpoint_epoch=epoch,
                                     seed=args.seed or 0)
    payload = [{
        "checkpoint_epoch": r.checkpoint_epoch,
        "shots": r.shots,
        "macro_dice": r.macro_dice,
        "micro_dice": r.micro_dice,
        "per_label": {str(k): v for k, v in r.per_label.items()},
    } for r in reports]
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "probe_report.json").write_text(json.dumps(payload, indent=2))
    print(json.dumps(payload))
    return 0


def _cmd_embed(args):
    state, _epoch = enc.load_checkpoint(args.checkpoint)
    volumes = load_volume_dir(args.data)
    labels = {}
    if args.labels:
        labels = json.loads(Path(args.labels).read_text())
    patch = PatchSize.of(args.patch).as_tuple()
    stride = PatchSize.of(args.stride or args.patch).as_tuple()
    store = EmbeddingStore(state.config.embed_dim)
    for idx, (vid, vol) in enumerate(sorted(volumes.items())):
        grid = sliding_window_embed(state, vol, patch, stride, scan_id=vid)
        vec = aggregate(grid.records, args.aggregate)
        store.add(EmbeddingRecord(id=idx, vector=vec,
                                  label=labels.get(vid), scan_id=vid))
    save_store(store, args.out)
    print(json.dumps({"records": len(store), "dim": store.dim,
                      "out": str(args.out)}))
    return 0


def _cmd_search(args):
    state, _ = enc.load_checkpoint(args.checkpoint)
    volumes = load_volume_dir(args.data)
    cfg = parse_run_config(args.config) if args.config else RunConfig()
    box = _triple(args.box) if args.box else tuple(cfg.search.get("box", (16, 16, 16)))
    stride = _triple(args.stride) if args.stride else tuple(cfg.search.get("stride", box))
    center = _triple(args.center)
    source = volumes[args.source]
    target_ids = args.targets.split(",")
    targets = [(tid, volumes[tid]) for tid in target_ids]
    results = semantic_search(state, source, center, box, targets, stride)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for r in results:
        heat = heatmap_to_volume(r, volumes[r.target_scan_id])
        save_volume(heat, out / f"heatmap_{r.target_scan_id}", kind="heatmap")
        summary.append({"target_id": r.target_scan_id,
                        "best_position": list(r.best_position),
                        "best_similarity": r.best_similarity})
    (out / "search.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return 0


def _cmd_retrieve_eval(args):
    corpus = load_store(args.store)
    queries = load_store(args.queries)
    k = args.k
    label_counts = {}
    for rec in corpus.records:
        if rec.label is not None:
            label_counts[rec.label] = label_counts.get(rec.label, 0) + 1
    rows = []
    for rec in queries.records:
        if rec.label is None:
            continue
        ranked = topk_search(rec.vector, corpus, k)
        by_id = {r.id: r for r in corpus.records}
        ranked_labels = [by_id[rid].label for rid, _sim in ranked]
        scores = retrieval_metrics(rec.label, ranked_labels,
                                   label_counts.get(rec.label, 0), k)
        rows.append({"query_id": rec.id, "label": rec.label,
                     "precision_at_k": scores.precision_at_k,
                     "average_precision_at_k": scores.average_precision_at_k,
                     "hit_rate": scores.hit_rate, "f1": scores.f1})
    if not rows:
        print("retrieve-eval: no labeled queries", file=sys.stderr)
        return 1
    mean = {key: float(np.mean([r[key] for r in rows]))
            for key in ("precision_at_k", "average_precision_at_k",
                        "hit_rate", "f1")}
    payload = {"k": k, "queries": len(rows), "mean": mean, "per_query": rows}
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2))
    print(json.dumps({"k": k, "queries": len(rows), "mean": mean}))
    return 0


def _cmd_saliency(args):
    state, _ = enc.load_checkpoint(args.checkpoint)
    volumes = load_volume_dir(args.data)
    vol = volumes[args.volume]
    sal = ofd_saliency(state, vol, (args.occ,) * 3, (args.stride,) * 3)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(saliency_to_volume(sal, vol), out / f"saliency_{args.volume}",
                kind="saliency")
    print(json.dumps({"volume": args.volume,
                      "max_distance": float(sal.grid.max()),
                      "grid_shape": list(sal.grid.shape)}))
    return 0


def _cmd_pca_map(args):
    state, _ = enc.load_checkpoint(args.checkpoint)
    volumes = load_volume_dir(args.data)
    ids = args.volumes.split(",") if args.volumes else sorted(volumes)
    patch = _triple(args.patch)
    stride = _triple(args.stride) if args.stride else patch
    chosen = {vid: volumes[vid] for vid in ids}
    overlays = pca_cielab_map(state, chosen, patch, stride)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for vid, overlay in zip(sorted(chosen), overlays):
        mid = overlay.shape[0] // 2
        _save_png(overlay[mid], out / f"pcamap_{vid}_z{mid}.png")
        np.save(out / f"pcamap_{vid}.npy", overlay)
    print(json.dumps({"volumes": list(sorted(chosen)), "out": str(out)}))
    return 0


def _cmd_stability(args):
    state, _ = enc.load_checkpoint(args.checkpoint)
    volumes = load_volume_dir(args.data)
    report = test_retest(state, volumes[args.volume_a], volumes[args.volume_b],
                         _triple(args.patch),
                         _triple(args.stride) if args.stride else _triple(args.patch),
                         outlier_threshold=args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_stability_csv(report, out)
    print(json.dumps({"median_similarity": report.median_similarity,
                      "min_similarity": report.min_similarity,
                      "outliers": len(report.outlier_positions),
                      "csv": str(out)}))
    return 0


def _cmd_ocd(args):
    state, _ = enc.load_checkpoint(args.checkpoint)
    data = Path(args.data)
    src_vol = load_volume(data / f"{args.source}.json")
    src_mask = load_mask(data / f"{args.source}_mask.json")
    tgt_vol = load_volume(data / f"{args.target}.json")
    tgt_mask = load_mask(data / f"{args.target}_mask.json")
    distance = ocd(src_vol, src_mask, tgt_vol, tgt_mask, args.label, state,
                   _triple(args.stride), box_size=_triple(args.box))
    print(json.dumps({"source": args.source, "target": args.target,
                      "label": args.label, "ocd_cm": distance}))
    return 0


def _cmd_serve(args):
    from .service import serve

    serve(args.data, args.checkpoint, host=args.host, port=args.port,
          ui_dir=args.ui)
    return 0


def _triple(value):
    if isinstance(value, (tuple, list)):
        parts = [int(p) for p in value]
    else:
        parts = [int(p) for p in str(value).split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 integers, got {value!r}")
    return tuple(parts)


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelfm",
        description="Volumetric intra-sample contrastive learning toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--seed", type=int, default=None)
        if out_required:
            p.add_argument("--out", required=True, help="output directory/file")

    p = sub.add_parser("phantom-gen", help="generate synthetic phantoms")
    common(p)
    p.add_argument("--count", type=int, default=8)
    p.set_defaults(fn=_cmd_phantom_gen, seed=0)

    p = sub.add_parser("pretrain", help="contrastive pre-training")
    common(p)
    p.add_argument("--data", required=True, help="volume directory")
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("ablate", help="strategy/crop ablation grid")
    p.add_argument("--config", required=True, help="run config JSON with an ablation section")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("probe", help="frozen-encoder few-shot probe")
    common(p, out_required=False)
    p.add_argument("--out")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="labeled volume directory")
    p.add_argument("--shots", default="2")
    p.set_defaults(fn=_cmd_probe)

    p = sub.add_parser("embed", help="build an embedding store")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="store file path")
    p.add_argument("--labels", help="JSON {volume_id: label}")
    p.add_argument("--patch", type=_triple, default=(16, 16, 16))
    p.add_argument("--stride", type=_triple, default=None)
    p.add_argument("--aggregate", choices=("min", "mean", "max"), default="min")
    p.set_defaults(fn=_cmd_embed)

    p = sub.add_parser("search", help="semantic concept search")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--center", required=True, type=_triple)
    p.add_argument("--box", type=_triple, default=None)
    p.add_argument("--stride", type=_triple, default=None)
    p.add_argument("--targets", required=True, help="comma-separated ids")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_search)

    p = sub.add_parser("retrieve-eval", help="retrieval metrics over stores")
    p.add_argument("--store", required=True, help="corpus store")
    p.add_argument("--queries", required=True, help="query store")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_retrieve_eval)

    p = sub.add_parser("saliency", help="occlusion saliency map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--occ", type=int, default=8)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_saliency)

    p = sub.add_parser("pca-map", help="PCA -> CIELAB concept overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--volumes", help="comma-separated ids (default all)")
    p.add_argument("--patch", type=_triple, default=(16, 16, 16))
    p.add_argument("--stride", type=_triple, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_pca_map)

    p = sub.add_parser("stability", help="test-retest embedding stability")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--volume-a", required=True)
    p.add_argument("--volume-b", required=True)
    p.add_argument("--patch", type=_triple, default=(16, 16, 16))
    p.add_argument("--stride", type=_triple, default=None)
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(fn=_cmd_stability)

    p = sub.add_parser("ocd", help="organ centroid distance between scans")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--label", type=int, required=True)
    p.add_argument("--stride", type=_triple, default=(4, 4, 4))
    p.add_argument("--box", type=_triple, default=(16, 16, 16))
    p.set_defaults(fn=_cmd_ocd)

    p = sub.add_parser("serve", help="run the explorer HTTP service")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8420)
    p.add_argument("--ui", help="static UI asset directory")
    p.set_defaults(fn=_cmd_serve)

    return parser


def cli_dispatch(argv) -> int:
    """Route argv to a subcommand: 0 success, 1 runtime error, 2 usage."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.fn(args)
    except (KeyboardInterrupt, BrokenPipeError):
        return 1
    except Exception as exc:
        print(f"voxelfm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
