"""Command-line surface tying the pipeline together.

Exit codes: 0 success, 1 typed domain error, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .ablation import format_ablation, run_ablation
from .errors import ConfigError, LanPoseError
from .grammar import load_grammar, parse as parse_instruction
from .maps import render_maps, square_roi
from .metrics import (
    eval_files,
    format_report,
    load_predictions,
    read_report_csv,
    recall_table,
    write_predictions,
    write_report_csv,
)
from .scene import GenConfig, assembly_pose, generate_dataset, load_records, pose_to_json
from .training import TrainConfig, TrainingData, load_trained, predict_records, train


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def _gen_config(path) -> GenConfig:
    return GenConfig.from_dict(_read_json(path)) if path else GenConfig()


def _train_config(path, seed=None) -> TrainConfig:
    cfg = TrainConfig.from_dict(_read_json(path)) if path else TrainConfig()
    if seed is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _cmd_gen_data(args) -> int:
    cfg = _gen_config(args.config)
    manifest = generate_dataset(cfg, args.n, args.seed, args.out, grammar=load_grammar(args.grammar))
    if args.dump_maps:
        _dump_maps(args.out, args.map_size)
    print(json.dumps({"out": args.out, "n_records": manifest["n_records"],
                      "content_sha256": manifest["content_sha256"]}))
    return 0


def _dump_maps(records_path: str, map_size: int):
    from .blocks import catalog_by_id

    catalog = catalog_by_id()
    records = load_records(records_path)
    entries = []
    blobs = []
    for rec in records:
        for role, oid in (("base", rec.base_id), ("target", rec.target_id)):
            obj = rec.scene.objects[oid]
            box = rec.boxes[oid]
            roi = square_roi(box)
            m = render_maps(rec.scene.camera, obj.pose, catalog[obj.block_id], roi, map_size)
            arr = np.empty((4, map_size, map_size), dtype=np.float32)
            arr[:3] = m.coords
            arr[3] = m.mask
            blobs.append(arr)
            entries.append({
                "record_id": rec.id,
                "role": role,
                "roi": {"cx": roi.cx, "cy": roi.cy, "w": roi.w, "h": roi.h},
            })
    data_path = records_path + ".maps.f32"
    np.stack(blobs).tofile(data_path)
    sidecar = {
        "dtype": "float32",
        "shape": [len(blobs), 4, map_size, map_size],
        "data_file": data_path,
        "entries": entries,
    }
    with open(records_path + ".maps.json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f)
        f.write("\n")


def _cmd_train(args) -> int:
    cfg = _train_config(args.config, args.seed)
    g = load_grammar(args.grammar)
    train_records = load_records(args.train, verify=True)
    val_records = load_records(args.val, verify=True)
    log = print if not args.quiet else None
    result = train(train_records, val_records, cfg, args.out_dir, grammar=g,
                   resume_from=args.resume, log=log)
    print(json.dumps({"checkpoint": result["checkpoint"], "metrics_csv": result["metrics_csv"],
                      "val": result["val"]}, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    if bool(args.pred) == bool(args.checkpoint):
        raise ConfigError("eval needs exactly one of --pred or --checkpoint")
    if args.pred:
        report = eval_files(args.data, args.pred)
    else:
        g = load_grammar(args.grammar)
        params, cfg = load_trained(args.checkpoint, grammar=g)
        records = load_records(args.data, verify=True)
        data = TrainingData(records, cfg, g)
        preds = predict_records(params, cfg, data)
        if args.dump_pred:
            write_predictions(args.dump_pred, preds)
        report = recall_table(records, preds)
    sys.stdout.write(format_report(report))
    if args.out:
        write_report_csv(args.out, report)
    return 0


def _cmd_ablate(args) -> int:
    cfg = _train_config(args.config)
    g = load_grammar(args.grammar)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    if not seeds:
        raise ConfigError("--seeds must list at least one integer")
    train_records = load_records(args.train, verify=True)
    val_records = load_records(args.val, verify=True)
    log = print if not args.quiet else None
    comparison = run_ablation(train_records, val_records, cfg, seeds, args.out_dir,
                              grammar=g, log=log)
    sys.stdout.write(format_ablation(comparison))
    return 0


def _cmd_parse(args) -> int:
    g = load_grammar(args.grammar)
    cmd = parse_instruction(args.text, g)
    print(json.dumps(cmd.to_json(), sort_keys=True))
    return 0


def _cmd_oracle(args) -> int:
    from .blocks import catalog_by_id
    from .grammar import ground

    g = load_grammar(args.grammar)
    records = load_records(args.data)
    by_id = {r.id: r for r in records}
    if args.record_id not in by_id:
        raise ConfigError(f"record {args.record_id} not found in {args.data}")
    rec = by_id[args.record_id]
    cmd = parse_instruction(args.text, g)
    base_id, target_id = ground(cmd, rec.scene)
    catalog = catalog_by_id()
    base = rec.scene.objects[base_id]
    target = rec.scene.objects[target_id]
    pose = assembly_pose(base.pose, cmd.action, catalog[base.block_id], catalog[target.block_id])
    print(json.dumps({
        "base_id": base_id,
        "target_id": target_id,
        "action": cmd.action.value,
        "assembly": pose_to_json(pose),
    }, sort_keys=True))
    return 0


def _cmd_report(args) -> int:
    report = read_report_csv(args.csv)
    sys.stdout.write(format_report(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lanpose",
                                description="language-conditioned 6D pose pipeline on synthetic block scenes")
    sub = p.add_subparsers(dest="command", required=True)

    def add_grammar(sp):
        sp.add_argument("--grammar", default=None, help="override the built-in grammar JSON")

    sp = sub.add_parser("gen-data", help="generate a dataset (JSON-lines + manifest)")
    sp.add_argument("--config", default=None, help="generation config JSON")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dump-maps", action="store_true", help="also write clean maps as flat float32")
    sp.add_argument("--map-size", type=int, default=32)
    add_grammar(sp)
    sp.set_defaults(func=_cmd_gen_data)

    sp = sub.add_parser("train", help="two-stage training run")
    sp.add_argument("--config", default=None, help="training config JSON")
    sp.add_argument("--train", required=True)
    sp.add_argument("--val", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--resume", default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--quiet", action="store_true")
    add_grammar(sp)
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("eval", help="score predictions or a checkpoint against a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--pred", default=None, help="predictions JSON-lines")
    sp.add_argument("--checkpoint", default=None, help="run inference from a checkpoint")
    sp.add_argument("--dump-pred", default=None, help="write inferred predictions here")
    sp.add_argument("--out", default=None, help="write the report CSV here")
    add_grammar(sp)
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("ablate", help="train + compare fusion/pose-head variants")
    sp.add_argument("--config", default=None)
    sp.add_argument("--train", required=True)
    sp.add_argument("--val", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--quiet", action="store_true")
    add_grammar(sp)
    sp.set_defaults(func=_cmd_ablate)

    sp = sub.add_parser("parse", help="parse an instruction into a command JSON")
    sp.add_argument("text")
    add_grammar(sp)
    sp.set_defaults(func=_cmd_parse)

    sp = sub.add_parser("oracle", help="ground an instruction in a record and print the assembly pose")
    sp.add_argument("--data", required=True, help="records JSON-lines")
    sp.add_argument("--record-id", type=int, required=True)
    sp.add_argument("--text", required=True)
    add_grammar(sp)
    sp.set_defaults(func=_cmd_oracle)

    sp = sub.add_parser("report", help="format a metrics CSV as a table")
    sp.add_argument("--csv", required=True)
    sp.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except LanPoseError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
