"""Command-line orchestration: gen-data, train-teacher, distill, analyze, compare.

One JSON config file drives every stage; unknown keys anywhere in it are
rejected with the offending key path, and a digest of the whole config is
stamped into every artifact the run produces. Reruns with identical config
and seeds reproduce identical output bytes.

Exit codes: 0 ok, 2 usage/config error, 3 numeric failure (NaN/divergence),
4 file-format or model-config mismatch. The output directory in the config
can be overridden with the DUALDISTILL_OUT_DIR environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, diagnostics, distill, masking, pipeline, vit
from .errors import ContractError, FormatError, NumericError, ShapeError, UsageError
from .util import config_digest, rng


@dataclass(frozen=True)
class DataParams:
    seed: int = 11
    n_train: int = 2000
    n_eval: int = 256
    image_size: int = 32
    class_count: int = 8


@dataclass(frozen=True)
class ModelParams:
    patch_size: int = 4
    channels: int = 1
    depth: int = 6
    heads: int = 4
    dim: int = 96
    mlp_ratio: int = 4


@dataclass(frozen=True)
class TeacherParams:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1.5e-3
    lr_min: float = 1e-5
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    seed: int = 101
    mask_ratio: float = 0.6      # mim objective only


@dataclass(frozen=True)
class DistillParams:
    alpha: float = 1.0
    feature_layer: int | None = None
    relation_layers: tuple[int, ...] | None = None
    drop_fraction: float = 0.3
    update_layers: tuple[int, ...] | None = None   # default: thirds of the depth
    decoder: str = "none"
    decoder_depth: int = 0
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1.5e-3
    lr_min: float = 1e-5
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    seed: int = 3
    n_images: int | None = None      # cap on distillation images (default: all)
    cache_targets: bool = True
    log_masks: bool = False          # per-step kept-index lists in the metrics log


@dataclass(frozen=True)
class AnalyzeParams:
    probes: int = 32
    probe_seed: int = 7


@dataclass(frozen=True)
class RunConfig:
    out_dir: str = "runs/out"
    data: DataParams = field(default_factory=DataParams)
    model: ModelParams = field(default_factory=ModelParams)
    teacher_supervised: TeacherParams = field(default_factory=TeacherParams)
    teacher_mim: TeacherParams = field(default_factory=lambda: TeacherParams(seed=202))
    distill: DistillParams = field(default_factory=DistillParams)
    analyze: AnalyzeParams = field(default_factory=AnalyzeParams)

    def digest(self) -> str:
        return config_digest(_to_jsonable(self))

    def vit_config(self, head: str = "none", n_classes: int = 0) -> vit.ViTConfig:
        return vit.ViTConfig(
            image_size=self.data.image_size, patch_size=self.model.patch_size,
            channels=self.model.channels, depth=self.model.depth,
            heads=self.model.heads, dim=self.model.dim,
            mlp_ratio=self.model.mlp_ratio, head=head, n_classes=n_classes,
            decoder=self.distill.decoder if head == "none" else "none",
            decoder_depth=self.distill.decoder_depth if head == "none" else 0)

    def resolved_out_dir(self) -> Path:
        out = os.environ.get("DUALDISTILL_OUT_DIR", self.out_dir)
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        return path


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_jsonable(v) for v in obj]
    return obj


def _build(cls, obj, path: str):
    """Strict dataclass construction: unknown keys fail with their path."""
    if not isinstance(obj, dict):
        raise UsageError(f"config section {path or 'root'} must be an object")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in obj.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            raise UsageError(f"unknown config key: {where}")
        hint = hints[key]
        nested = _nested_dataclass(hint)
        if nested is not None:
            kwargs[key] = _build(nested, value, where)
        else:
            kwargs[key] = _coerce(hint, value, where)
    try:
        return cls(**kwargs)
    except (ContractError, TypeError) as e:
        raise UsageError(f"invalid config near {path or 'root'}: {e}") from e


def _nested_dataclass(hint):
    if dataclasses.is_dataclass(hint):
        return hint
    return None


def _coerce(hint, value, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None:
            if type(None) in args:
                return None
            raise UsageError(f"null not allowed for {where}")
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)
        args = typing.get_args(hint)
    if origin is tuple:
        if not isinstance(value, list):
            raise UsageError(f"{where} must be a list")
        return tuple(int(v) for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise UsageError(f"{where} must be a boolean")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise UsageError(f"{where} must be an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"{where} must be a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise UsageError(f"{where} must be a string")
        return value
    raise UsageError(f"unsupported config value at {where}")


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}")
    return _build(RunConfig, obj, "")


class MetricsLog:
    """Append-only line-delimited JSON stream of step records and snapshots."""

    def __init__(self, path: Path, digest: str):
        self.path = path
        self.fh = open(path, "w")
        self._write({"kind": "meta", "config_digest": digest})

    def _write(self, rec: dict) -> None:
        self.fh.write(json.dumps(rec, sort_keys=True))
        self.fh.write("\n")

    def step(self, rec: dict) -> None:
        self._write(rec)

    def snapshot(self, epoch: int, stats: diagnostics.AttentionStats) -> None:
        self._write({"kind": "epoch_diag", "epoch": epoch,
                     "per_layer_means": stats.per_layer_means()})

    def close(self) -> None:
        self.fh.close()


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: RunConfig) -> int:
    out = cfg.resolved_out_dir()
    digest = cfg.digest()
    d = cfg.data
    train = data.generate(d.seed, d.n_train, d.image_size, d.class_count, "train")
    evals = data.generate(d.seed + 1, d.n_eval, d.image_size, d.class_count, "eval")
    data.save_dataset(str(out / "train.ds"), train, {"config_digest": digest})
    data.save_dataset(str(out / "eval.ds"), evals, {"config_digest": digest})
    print(f"wrote {out / 'train.ds'} ({train.n} images) and "
          f"{out / 'eval.ds'} ({evals.n} images) digest={digest}")
    return 0


def cmd_train_teacher(cfg: RunConfig, objective: str) -> int:
    out = cfg.resolved_out_dir()
    digest = cfg.digest()
    ds = data.load_dataset(str(out / "train.ds"), split="train")
    if objective == "supervised":
        tp = cfg.teacher_supervised
        model_cfg = cfg.vit_config(head="classify", n_classes=ds.class_count)
        params, log = data.pretrain_supervised_teacher(
            model_cfg, ds, data.TrainConfig(
                epochs=tp.epochs, batch_size=tp.batch_size, lr=tp.lr, lr_min=tp.lr_min,
                weight_decay=tp.weight_decay, warmup_frac=tp.warmup_frac, seed=tp.seed))
    else:
        tp = cfg.teacher_mim
        model_cfg = cfg.vit_config(head="reconstruct")
        params, log = data.pretrain_mim_teacher(
            model_cfg, ds, data.ReconTask(tp.mask_ratio), data.TrainConfig(
                epochs=tp.epochs, batch_size=tp.batch_size, lr=tp.lr, lr_min=tp.lr_min,
                weight_decay=tp.weight_decay, warmup_frac=tp.warmup_frac, seed=tp.seed))
    ckpt = out / f"teacher_{objective}.ckpt"
    vit.save_checkpoint(str(ckpt), params, {"config_digest": digest,
                                            "objective": objective})
    with open(out / f"teacher_{objective}_log.jsonl", "w") as fh:
        fh.write(json.dumps({"kind": "meta", "config_digest": digest}) + "\n")
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    last = log[-1] if log else {}
    print(f"wrote {ckpt} ({params.num_params()} params) last={last} digest={digest}")
    return 0


def cmd_distill(cfg: RunConfig, teacher_c: str, teacher_m: str) -> int:
    out = cfg.resolved_out_dir()
    digest = cfg.digest()
    dp = cfg.distill
    feat_teacher, _ = vit.load_checkpoint(teacher_c, frozen=True)
    rel_teacher, _ = vit.load_checkpoint(teacher_m, frozen=True)
    student_cfg = cfg.vit_config()
    try:
        teachers = distill.TeacherBundle(feat=feat_teacher, rel=rel_teacher)
        teachers.check_structure(student_cfg)
    except ContractError as e:
        raise FormatError(str(e)) from e
    depth = student_cfg.depth
    if dp.update_layers is None:
        schedule = masking.MaskSchedule.thirds(depth, dp.drop_fraction)
    else:
        schedule = masking.MaskSchedule(update_layers=dp.update_layers,
                                        drop_fraction=dp.drop_fraction)
    dcfg = distill.DistillConfig(alpha=dp.alpha, feature_layer=dp.feature_layer,
                                 relation_layers=dp.relation_layers, schedule=schedule,
                                 student_decoder=dp.decoder,
                                 student_decoder_depth=dp.decoder_depth)
    train_ds = data.load_dataset(str(out / "train.ds"), split="train")
    images = train_ds.images
    if dp.n_images is not None:
        images = images[:dp.n_images]
    student = vit.init_params(student_cfg, dp.seed)
    probes = _load_probes(cfg, out)
    log = MetricsLog(out / "distill_metrics.jsonl", digest)
    try:
        pipeline.distill_train(
            student, teachers, images, dcfg,
            pipeline.DistillTrainConfig(
                epochs=dp.epochs, batch_size=dp.batch_size, lr=dp.lr, lr_min=dp.lr_min,
                weight_decay=dp.weight_decay, warmup_frac=dp.warmup_frac,
                seed=dp.seed, cache_targets=dp.cache_targets, log_masks=dp.log_masks),
            on_step=log.step,
            on_epoch=lambda epoch, st: log.snapshot(
                epoch, diagnostics.model_report(_frozen_view(st), probes)))
    finally:
        log.close()
    ckpt = out / "student.ckpt"
    vit.save_checkpoint(str(ckpt), student, {"config_digest": digest})
    print(f"wrote {ckpt} and {log.path} digest={digest}")
    return 0


def _frozen_view(params: vit.ViTParams) -> vit.ViTParams:
    """Read-only copy for mid-training diagnostics."""
    return params.clone(requires_grad=False).freeze()


def _load_probes(cfg: RunConfig, out: Path) -> np.ndarray:
    eval_path = out / "eval.ds"
    if eval_path.exists():
        ds = data.load_dataset(str(eval_path), split="eval")
    else:
        ds = data.generate(cfg.data.seed + 1, cfg.data.n_eval,
                           cfg.data.image_size, cfg.data.class_count, "eval")
    gen = rng(cfg.analyze.probe_seed, "probes")
    pick = np.sort(gen.permutation(ds.n)[:cfg.analyze.probes])
    return ds.images[pick]


def cmd_analyze(cfg: RunConfig, checkpoint: str, dataset: str,
                probes: int | None = None) -> int:
    out = cfg.resolved_out_dir()
    digest = cfg.digest()
    params, _ = vit.load_checkpoint(checkpoint, frozen=True)
    ds = data.load_dataset(dataset)
    n_probes = probes if probes is not None else cfg.analyze.probes
    gen = rng(cfg.analyze.probe_seed, "probes")
    pick = np.sort(gen.permutation(ds.n)[:n_probes])
    stats = diagnostics.model_report(params, ds.images[pick],
                                     include_decoder=params.config.decoder != "none")
    stem = Path(checkpoint).stem
    csv_path = out / f"{stem}_diagnostics.csv"
    json_path = out / f"{stem}_diagnostics.json"
    diagnostics.write_report_csv(stats, str(csv_path))
    diagnostics.write_report_json(stats, str(json_path), digest,
                                  cfg.analyze.probe_seed,
                                  model_config=params.config.to_dict())
    print(f"wrote {csv_path} and {json_path} digest={digest}")
    return 0


def cmd_compare(report_a: str, report_b: str, out_path: str | None = None) -> int:
    """Per-layer metric deltas (B minus A) between two analyze reports."""
    with open(report_a) as fh:
        a = json.load(fh)
    with open(report_b) as fh:
        b = json.load(fh)
    if a.get("model_config") != b.get("model_config"):
        raise FormatError("compare refuses reports from different model configs")
    rows = []
    by_layer_b = {(r["layer"], r["decoder"]): r for r in b["per_layer_means"]}
    for ra in a["per_layer_means"]:
        rb = by_layer_b.get((ra["layer"], ra["decoder"]))
        if rb is None:
            continue
        rows.append({
            "layer": ra["layer"], "decoder": ra["decoder"],
            "d_avg_dist_patch": rb["avg_dist_patch"] - ra["avg_dist_patch"],
            "d_avg_dist_px": rb["avg_dist_px"] - ra["avg_dist_px"],
            "d_nmi": rb["nmi"] - ra["nmi"],
        })
    print("layer decoder d_avg_dist_patch d_avg_dist_px d_nmi")
    for r in rows:
        print(f"{r['layer']} {int(r['decoder'])} {r['d_avg_dist_patch']:+.6f} "
              f"{r['d_avg_dist_px']:+.6f} {r['d_nmi']:+.6f}")
    if out_path:
        with open(out_path, "w") as fh:
            json.dump({"report_a": report_a, "report_b": report_b, "deltas": rows},
                      fh, indent=1, sort_keys=True)
            fh.write("\n")
    return 0


# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualdistill",
                                description="two-teacher ViT distillation workbench")
    sub = p.add_subparsers(dest="command", required=True)

    gd = sub.add_parser("gen-data", help="generate train/eval dataset files")
    gd.add_argument("config")

    tt = sub.add_parser("train-teacher", help="pretrain a frozen proxy teacher")
    tt.add_argument("config")
    tt.add_argument("--objective", choices=["supervised", "mim"], required=True)

    di = sub.add_parser("distill", help="run two-teacher distillation")
    di.add_argument("config")
    di.add_argument("--teacher-c", required=True, help="feature teacher checkpoint")
    di.add_argument("--teacher-m", required=True, help="relation (MIM) teacher checkpoint")

    an = sub.add_parser("analyze", help="emit attention diagnostics for a checkpoint")
    an.add_argument("config")
    an.add_argument("checkpoint")
    an.add_argument("dataset")
    an.add_argument("--probes", type=int, default=None)

    cp = sub.add_parser("compare", help="per-layer metric deltas between two reports")
    cp.add_argument("report_a")
    cp.add_argument("report_b")
    cp.add_argument("--out", default=None)
    return p


def run(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        if args.command == "gen-data":
            return cmd_gen_data(load_config(args.config))
        if args.command == "train-teacher":
            return cmd_train_teacher(load_config(args.config), args.objective)
        if args.command == "distill":
            return cmd_distill(load_config(args.config), args.teacher_c, args.teacher_m)
        if args.command == "analyze":
            return cmd_analyze(load_config(args.config), args.checkpoint,
                               args.dataset, args.probes)
        if args.command == "compare":
            return cmd_compare(args.report_a, args.report_b, args.out)
        raise UsageError(f"unknown command {args.command}")
    except (UsageError, ContractError, ShapeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
