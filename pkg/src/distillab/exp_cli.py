"""Command-line experiment harness.

Subcommands cover the full pipeline: gen-data writes the corpus, train-teacher
fits the teacher by SFT, distill trains a student with the configured
strategy, evaluate scores every checkpoint in the run directory, and sweep
runs a (parameter value x seed) grid and aggregates medians.

Configs are YAML with the same nesting as DEFAULT_CONFIG below; omitted keys
take the documented defaults and unknown keys are hard errors. --config also
accepts the name of a preset shipped with the package (see list_presets).
Every command writes deterministic bytes, so re-running a command over an
existing output directory reproduces it exactly.

Seeds: one experiment seed drives three derived streams (teacher init,
student init, batch order), so sweeps reuse one teacher per seed while
students stay independent.
"""

import argparse
import concurrent.futures
import hashlib
import json
import os
import statistics
import sys
from dataclasses import asdict, dataclass, replace
from importlib import resources
from pathlib import Path

import yaml

from .errors import InvalidInputError, TrainingDiverged
from .eval_metrics import teacher_agreement
from .kd_losses import ALL_STRATEGIES, DistillConfig
from .seq_model import ModelConfig, load_checkpoint, save_checkpoint
from .synth_task import (
    TaskSpec,
    fingerprint,
    generate_corpus,
    read_corpus,
    write_corpus,
)
from .trainer import TrainConfig, distill, evaluate, role_seed, train_sft

WORKERS_ENV = "DISTILLAB_SWEEP_WORKERS"

# Parameters a sweep may scan. "lambda" is the config-file spelling of lam.
SWEEPABLE = ("strategy", "lambda", "beta", "gamma", "k_percent",
             "beta_begin", "beta_end")

DEFAULT_CONFIG = {
    "task": asdict(TaskSpec()),
    "teacher_model": {
        "d_model": 128, "n_layers": 4, "n_heads": 4, "d_ff": 512,
        "max_seq_len": 40,
    },
    "student_model": {
        "d_model": 64, "n_layers": 2, "n_heads": 2, "d_ff": 256,
        "max_seq_len": 40,
    },
    "train": {
        "epochs": 3, "batch_size": 64, "lr": 1e-3, "warmup_ratio": 0.03,
        "eval_every": 100, "checkpoint_policy": "best_on_valid",
    },
    "distill": {
        "strategy": "self_evolution", "lambda": 0.5, "beta": 0.5,
        "gamma": 0.4, "selection": "threshold", "k_percent": 30.0,
        "beta_schedule": "static", "beta_begin": 0.5, "beta_end": 0.0,
    },
    "seed": 0,
    "seeds": [0],
    "sweep": {"parameter": None, "values": []},
}


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec
    teacher_model: ModelConfig
    student_model: ModelConfig
    train: TrainConfig
    distill: DistillConfig
    seed: int
    seeds: tuple
    sweep_parameter: str | None
    sweep_values: tuple
    resolved: dict

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(self.resolved, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _merge(defaults: dict, override, path: str) -> dict:
    if not isinstance(override, dict):
        raise InvalidInputError(
            f"config section {path or '<root>'} must be a mapping")
    out = dict(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise InvalidInputError(f"unknown config key {path}{key}")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def list_presets() -> list[str]:
    root = resources.files("distillab").joinpath("presets")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def _read_config_text(arg: str) -> str:
    path = Path(arg)
    if path.exists():
        return path.read_text()
    if "/" not in arg and not arg.endswith(".yaml"):
        preset = resources.files("distillab").joinpath(f"presets/{arg}.yaml")
        if preset.is_file():
            return preset.read_text()
        raise InvalidInputError(
            f"missing config file {arg} (known presets: "
            f"{', '.join(list_presets())})"
        )
    raise InvalidInputError(f"missing config file {arg}")


def _distill_from(section: dict, **override) -> DistillConfig:
    fields = dict(section)
    fields["lam"] = fields.pop("lambda")
    fields.update(override)
    return DistillConfig(**fields)


def _sweep_cell_config(base: DistillConfig, parameter: str, value):
    """DistillConfig for one sweep cell, or None for the plain-SFT cell."""
    if parameter == "strategy":
        if value not in ALL_STRATEGIES:
            raise InvalidInputError(
                f"sweep value {value!r} is not a strategy {ALL_STRATEGIES}")
        if value == "sft":
            return None
        return replace(base, strategy=value)
    field = "lam" if parameter == "lambda" else parameter
    try:
        return replace(base, **{field: value})
    except TypeError as e:
        raise InvalidInputError(f"sweep value {value!r} invalid for "
                                f"{parameter}: {e}") from e


def load_config(config_arg: str | None, seed_override: int | None = None
                ) -> ExperimentConfig:
    """Resolve a YAML file (or preset name, or None for pure defaults)."""
    raw = {}
    if config_arg is not None:
        text = _read_config_text(config_arg)
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise InvalidInputError(f"config {config_arg} is not valid YAML: {e}")
    resolved = _merge(DEFAULT_CONFIG, raw, "")
    if seed_override is not None:
        resolved["seed"] = seed_override
        resolved["seeds"] = [seed_override]
    task = TaskSpec(**resolved["task"])
    teacher = ModelConfig(vocab_size=task.vocab_size, seed=0,
                          **resolved["teacher_model"])
    student = ModelConfig(vocab_size=task.vocab_size, seed=0,
                          **resolved["student_model"])
    train = TrainConfig(seed=0, **resolved["train"])
    dist = _distill_from(resolved["distill"])
    parameter = resolved["sweep"]["parameter"]
    values = tuple(resolved["sweep"]["values"])
    if parameter is not None:
        if parameter not in SWEEPABLE:
            raise InvalidInputError(
                f"sweep.parameter must be one of {SWEEPABLE}, got {parameter!r}")
        if not values:
            raise InvalidInputError("sweep.values must be a nonempty list")
        for v in values:
            _sweep_cell_config(dist, parameter, v)  # validates each cell
    seeds = tuple(resolved["seeds"])
    if not seeds:
        raise InvalidInputError("seeds must be a nonempty list")
    return ExperimentConfig(
        task=task, teacher_model=teacher, student_model=student, train=train,
        distill=dist, seed=int(resolved["seed"]), seeds=seeds,
        sweep_parameter=parameter, sweep_values=values, resolved=resolved,
    )


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _fmt(x) -> str:
    return "%.17g" % x if isinstance(x, float) else str(x)


def _load_run_corpus(cfg: ExperimentConfig, out: Path):
    return read_corpus(out / "data", cfg.task)


def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> None:
    corpus = generate_corpus(cfg.task)
    write_corpus(corpus, out / "data")
    _write_json(out / "data" / "task.json",
                {"fingerprint": fingerprint(cfg.task), **asdict(cfg.task)})
    print(f"wrote corpus ({len(corpus.train)}/{len(corpus.valid)}/"
          f"{len(corpus.test)} examples) to {out / 'data'}")


def cmd_train_teacher(cfg: ExperimentConfig, out: Path) -> None:
    corpus = _load_run_corpus(cfg, out)
    model_cfg = replace(cfg.teacher_model, seed=role_seed(cfg.seed, "teacher"))
    train_cfg = replace(cfg.train, seed=role_seed(cfg.seed, "order"))
    params, metrics = train_sft(model_cfg, corpus, train_cfg)
    tdir = out / "teacher"
    tdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(tdir, params)
    metrics.write_csv(tdir / "metrics.csv")
    report = evaluate(params, corpus.test)
    _write_json(tdir / "summary.json", {
        "role": "teacher",
        "config_fingerprint": cfg.fingerprint,
        "seed": cfg.seed,
        "test_bleu": report.bleu,
        "test_token_accuracy": report.token_accuracy,
        "test_seq_exact_match": report.seq_exact_match,
    })
    print(f"teacher test BLEU {report.bleu:.2f} -> {tdir}")


def cmd_distill(cfg: ExperimentConfig, out: Path) -> None:
    corpus = _load_run_corpus(cfg, out)
    teacher = load_checkpoint(out / "teacher")
    model_cfg = replace(cfg.student_model, seed=role_seed(cfg.seed, "student"))
    train_cfg = replace(cfg.train, seed=role_seed(cfg.seed, "order"))
    params, metrics = distill(model_cfg, teacher, corpus, train_cfg, cfg.distill)
    sdir = out / "distill" / cfg.distill.strategy
    sdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(sdir, params)
    metrics.write_csv(sdir / "metrics.csv")
    report = evaluate(params, corpus.test, teacher_params=teacher)
    _write_json(sdir / "summary.json", {
        "role": "student",
        "strategy": cfg.distill.strategy,
        "config_fingerprint": cfg.fingerprint,
        "seed": cfg.seed,
        "test_bleu": report.bleu,
        "test_token_accuracy": report.token_accuracy,
        "test_seq_exact_match": report.seq_exact_match,
        "mean_token_kl_to_teacher": report.mean_token_kl_to_teacher,
        "teacher_agreement": teacher_agreement(params, teacher, corpus.test),
    })
    print(f"{cfg.distill.strategy} student test BLEU {report.bleu:.2f} -> {sdir}")


def cmd_evaluate(cfg: ExperimentConfig, out: Path) -> None:
    corpus = _load_run_corpus(cfg, out)
    teacher = None
    rows = []
    if (out / "teacher" / "manifest.json").exists():
        teacher = load_checkpoint(out / "teacher")
        report = evaluate(teacher, corpus.test)
        rows.append({"name": "teacher", "bleu": report.bleu,
                     "token_accuracy": report.token_accuracy,
                     "seq_exact_match": report.seq_exact_match})
    distill_root = out / "distill"
    if distill_root.is_dir():
        for ckpt in sorted(distill_root.iterdir()):
            if not (ckpt / "manifest.json").exists():
                continue
            params = load_checkpoint(ckpt)
            report = evaluate(params, corpus.test, teacher_params=teacher)
            row = {"name": ckpt.name, "bleu": report.bleu,
                   "token_accuracy": report.token_accuracy,
                   "seq_exact_match": report.seq_exact_match}
            if teacher is not None:
                row["teacher_agreement"] = teacher_agreement(
                    params, teacher, corpus.test)
                row["mean_token_kl_to_teacher"] = report.mean_token_kl_to_teacher
            rows.append(row)
    if not rows:
        raise InvalidInputError(f"no checkpoints to evaluate under {out}")
    _write_json(out / "evaluation.json",
                {"config_fingerprint": cfg.fingerprint, "rows": rows})
    for row in rows:
        print(f"{row['name']:>16}  BLEU {row['bleu']:7.2f}  "
              f"acc {row['token_accuracy']:.3f}")


def _train_sweep_teacher(cfg: ExperimentConfig, corpus, seed: int):
    model_cfg = replace(cfg.teacher_model, seed=role_seed(seed, "teacher"))
    train_cfg = replace(cfg.train, seed=role_seed(seed, "order"))
    params, _ = train_sft(model_cfg, corpus, train_cfg)
    return params


def _run_sweep_cell(cfg: ExperimentConfig, corpus, teacher, value, seed: int):
    dist_cfg = _sweep_cell_config(cfg.distill, cfg.sweep_parameter, value)
    model_cfg = replace(cfg.student_model, seed=role_seed(seed, "student"))
    train_cfg = replace(cfg.train, seed=role_seed(seed, "order"))
    if dist_cfg is None:
        params, _ = train_sft(model_cfg, corpus, train_cfg)
    else:
        params, _ = distill(model_cfg, teacher, corpus, train_cfg, dist_cfg)
    report = evaluate(params, corpus.test)
    agree = teacher_agreement(params, teacher, corpus.test)
    return {
        "parameter": cfg.sweep_parameter,
        "value": value,
        "seed": seed,
        "bleu": report.bleu,
        "token_accuracy": report.token_accuracy,
        "seq_exact_match": report.seq_exact_match,
        "teacher_agreement": agree,
    }


_SWEEP_COLUMNS = ("parameter", "value", "seed", "bleu", "token_accuracy",
                  "seq_exact_match", "teacher_agreement")
_SWEEP_METRICS = ("bleu", "token_accuracy", "seq_exact_match",
                  "teacher_agreement")


def sweep_rows_to_csv(rows) -> str:
    lines = [",".join(_SWEEP_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in _SWEEP_COLUMNS))
    return "\n".join(lines) + "\n"


def aggregate_sweep(rows, values, seeds) -> list[dict]:
    """Per-seed rows plus one median row per value, grouped by value."""
    out = []
    for value in values:
        cell_rows = [r for r in rows if r["value"] == value]
        out.extend(cell_rows)
        median = {"parameter": cell_rows[0]["parameter"], "value": value,
                  "seed": "median"}
        for metric in _SWEEP_METRICS:
            median[metric] = statistics.median(r[metric] for r in cell_rows)
        out.append(median)
    return out


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> None:
    if cfg.sweep_parameter is None:
        raise InvalidInputError("sweep.parameter is required for the sweep command")
    corpus = generate_corpus(cfg.task)
    teachers = {}
    for seed in cfg.seeds:
        teachers[seed] = _train_sweep_teacher(cfg, corpus, seed)
        print(f"teacher for seed {seed} ready")
    cells = [(value, seed) for value in cfg.sweep_values for seed in cfg.seeds]
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_sweep_cell, cfg, corpus, teachers[seed],
                            value, seed)
                for value, seed in cells
            ]
            rows = [f.result() for f in futures]
    else:
        rows = []
        for value, seed in cells:
            rows.append(_run_sweep_cell(cfg, corpus, teachers[seed], value, seed))
            print(f"{cfg.sweep_parameter}={value} seed={seed} "
                  f"BLEU {rows[-1]['bleu']:.2f}")
    table = aggregate_sweep(rows, cfg.sweep_values, cfg.seeds)
    sweep_dir = out / "sweep"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    (sweep_dir / "results.csv").write_text(sweep_rows_to_csv(table))
    _write_json(sweep_dir / "sweep.json", {
        "config_fingerprint": cfg.fingerprint,
        "parameter": cfg.sweep_parameter,
        "values": list(cfg.sweep_values),
        "seeds": list(cfg.seeds),
    })
    print(f"wrote {len(table)} rows to {sweep_dir / 'results.csv'}")


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distillab",
        description="Token-adaptive knowledge distillation on a synthetic "
                    "translation task.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", default=None,
                       help="YAML config path or shipped preset name "
                            f"({', '.join(list_presets())}); "
                            "defaults apply when omitted")
        p.add_argument("--out", required=True, help="run output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the experiment seed (and seed list)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        _COMMANDS[args.command](cfg, Path(args.out))
    except (InvalidInputError, TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
