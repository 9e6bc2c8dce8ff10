#!/usr/bin/env python3
"""desp - generate set datasets, train energy models and baselines, evaluate them."""
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import click
import orjson
from pydantic import ValidationError

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from lib.checkpoint import load_checkpoint, save_checkpoint
from lib.config import RunConfig, config_hash, load_config, validate_config
from lib.datasets import (
    DIGITS,
    Example,
    dataset_task,
    generate,
    parse_sizes,
    read_dataset,
    task_info,
    write_dataset,
)
from lib.errors import ConfigError, ContractError, DespError
from lib.evaluation import (
    ABLATION_HEADER,
    ablate_st,
    anomaly_subsets,
    eval_sampler,
    evaluate,
    multimodal_report,
    raw_predictions,
    write_metrics,
    write_rows,
)
from lib.log import configure_logging
from lib.render import render_svg
from lib.set_networks import PaddedSetBatch, default_dims
from lib.training import init_energy_model, resume_state, train, train_baseline, train_outlier_baseline

TASK_CHOICE = click.Choice(["polygons", "digits", "anomaly"])
EXISTING = click.Path(exists=True, dir_okay=False, path_type=Path)
OUTPUT = click.Path(dir_okay=False, path_type=Path)


def _run_config(path: Optional[Path], task: str) -> RunConfig:
    cfg = load_config(path) if path else RunConfig(task=task)
    if "task" in cfg.model_fields_set and cfg.task != task:
        raise ConfigError(f"config is for task {cfg.task!r} but the data holds {task!r}")
    return cfg


def _load(path: Path) -> List[Example]:
    examples = read_dataset(path)
    if not examples:
        raise ContractError(f"{path}: no examples")
    return examples


@click.group()
@click.option("--log-level", default=None, help="loguru level (default: DESP_LOG_LEVEL or INFO)")
def cli(log_level):
    """Deep energy-based set prediction toolkit."""
    configure_logging(log_level)
    validate_config()


@cli.command()
@click.option("--dataset", "task", type=TASK_CHOICE, required=True)
@click.option("--count", type=click.IntRange(min=0), required=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--sizes", default=None, help='polygon sizes, "3..6" or "3,5,8"')
@click.option("--digits", "digit_names", default=",".join(DIGITS), show_default=True)
@click.option("--start", type=click.IntRange(min=0), default=0, help="id of the first example")
@click.option("--out", type=OUTPUT, required=True)
def gen(task, count, seed, sizes, digit_names, start, out):
    """Write COUNT seeded examples as JSON lines."""
    digits = [d.strip() for d in digit_names.split(",") if d.strip()]
    examples = generate(task, count, seed, sizes=parse_sizes(sizes) if sizes else None,
                        digits=digits, start=start)
    written = write_dataset(out, examples)
    click.echo(f"{out}: {written} examples")


@cli.command("train")
@click.option("--config", "config_path", type=EXISTING, default=None)
@click.option("--data", type=EXISTING, required=True)
@click.option("--out", type=OUTPUT, required=True)
@click.option("--metrics", type=OUTPUT, default=None, help="metrics CSV (default: <out>.metrics.csv)")
@click.option("--val", type=EXISTING, default=None, help="held-out examples for val_E_pos / val_E_neg")
@click.option("--resume", type=EXISTING, default=None, help="checkpoint to continue from")
@click.option("--progress/--no-progress", default=None)
def train_cmd(config_path, data, out, metrics, val, resume, progress):
    """Contrastive training of an energy model."""
    examples = _load(data)
    info = task_info(dataset_task(examples))
    cfg = _run_config(config_path, info.name)
    overrides = dict(cfg.model)
    kind = overrides.pop("kind", "DeepSets")
    try:
        dims = default_dims(info, kind, **overrides)
    except ValidationError as exc:
        raise ConfigError(f"model section: {exc}") from exc

    start_epoch, adam_state = 0, None
    if resume:
        ckpt = load_checkpoint(resume)
        if not ckpt.is_energy:
            raise ContractError(f"{resume} is not an energy checkpoint")
        model = ckpt.model
        start_epoch, adam_state = resume_state(ckpt.state, model)
    else:
        model = init_energy_model(info, dims, cfg.train)
    digest = config_hash({"train": cfg.train.model_dump(mode="json"), "model": model.dims.model_dump(mode="json")})
    metrics = metrics or out.with_suffix(".metrics.csv")
    result = train(model, examples, cfg.train, info=info, checkpoint_path=out, metrics_path=metrics,
                   val=_load(val) if val else None, start_epoch=start_epoch, adam_state=adam_state,
                   config_digest=digest, resumed_from=resume, progress=progress)
    click.echo(f"checkpoint: {result.last_checkpoint}")
    click.echo(f"metrics: {metrics}")


@cli.command("train-baseline")
@click.option("--loss", "loss_kind", type=click.Choice(["chamfer", "hungarian", "outlier"]), required=True)
@click.option("--config", "config_path", type=EXISTING, default=None)
@click.option("--data", type=EXISTING, required=True)
@click.option("--out", type=OUTPUT, required=True)
@click.option("--progress/--no-progress", default=None)
def train_baseline_cmd(loss_kind, config_path, data, out, progress):
    """Direct risk minimization under a set loss, or the per-element outlier classifier."""
    examples = _load(data)
    info = task_info(dataset_task(examples))
    cfg = _run_config(config_path, info.name)
    if loss_kind == "outlier":
        fit = train_outlier_baseline(examples, cfg.baseline, progress=progress)
    else:
        fit = train_baseline(loss_kind, examples, cfg.baseline, info=info, progress=progress)
    save_checkpoint(out, fit.model, config_hash=config_hash(cfg.baseline))
    click.echo(f"checkpoint: {out}")


@cli.command()
@click.option("--ckpt", type=EXISTING, required=True)
@click.option("--data", type=EXISTING, required=True)
@click.option("--out", type=OUTPUT, required=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--config", "config_path", type=EXISTING, default=None, help="sampler schedule (train.sampler)")
def predict(ckpt, data, out, seed, config_path):
    """Predict one set per input; anomaly sets keep features and get the sampled indicator."""
    checkpoint = load_checkpoint(ckpt)
    examples = _load(data)
    info = task_info(dataset_task(examples))
    sampler = eval_sampler(_run_config(config_path, info.name).train.sampler,
                           checkpoint.kind if checkpoint.is_energy else "DeepSets", seed)
    ids = list(range(len(examples)))
    records = []
    if info.name == "anomaly":
        subsets, _ = anomaly_subsets(checkpoint.model, info, examples, ids, sampler, repeats=1)
        for i, (example, runs) in enumerate(zip(examples, subsets)):
            target = example.target.copy()
            target[:, -1] = -1.0
            target[runs[0], -1] = 1.0
            records.append(Example(info.name, example.input, target, {"id": i, "seed": seed}))
    else:
        values = raw_predictions(checkpoint.model, info, examples, ids, sampler)
        for i, (example, pred) in enumerate(zip(examples, PaddedSetBatch.from_prediction(values).sets())):
            records.append(Example(info.name, example.input, pred, {"id": i, "seed": seed}))
    write_dataset(out, records)
    click.echo(f"{out}: {len(records)} predictions")


@cli.command("eval")
@click.option("--ckpt", type=EXISTING, required=True)
@click.option("--data", type=EXISTING, required=True)
@click.option("--out", type=OUTPUT, required=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--split", type=click.Choice(["all", "ambiguous"]), default="all", show_default=True)
@click.option("--config", "config_path", type=EXISTING, default=None, help="sampler schedule (train.sampler)")
def eval_cmd(ckpt, data, out, seed, split, config_path):
    """Set losses (polygons, digits) or subset metrics over 10 predictions (anomaly)."""
    checkpoint = load_checkpoint(ckpt)
    examples = _load(data)
    cfg = _run_config(config_path, dataset_task(examples))
    metrics = evaluate(checkpoint, examples, seed=seed, sampler=cfg.train.sampler, split=split,
                       dataset=data.name)
    write_metrics(out, [metrics])
    click.echo(orjson.dumps(metrics.model_dump()).decode())


@cli.command("ablate-st")
@click.option("--ckpt", type=EXISTING, required=True)
@click.option("--data", type=EXISTING, required=True)
@click.option("--out", type=OUTPUT, required=True)
@click.option("--ratios", default="0,0.2,0.4,0.6,0.8,1.0", show_default=True)
@click.option("--seeds", type=click.IntRange(min=1), default=1, show_default=True, help="number of seeds averaged")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True, help="first seed")
@click.option("--config", "config_path", type=EXISTING, default=None, help="sampler schedule (train.sampler)")
def ablate_st_cmd(ckpt, data, out, ratios, seeds, seed, config_path):
    """Mean energy and set losses for several noisy-step fractions S/T."""
    try:
        ratio_list = [float(r) for r in ratios.split(",") if r.strip()]
    except ValueError:
        raise click.BadParameter(f"cannot parse {ratios!r}", param_hint="--ratios") from None
    checkpoint = load_checkpoint(ckpt)
    examples = _load(data)
    cfg = _run_config(config_path, dataset_task(examples))
    rows = ablate_st(checkpoint, examples, ratio_list, sampler=cfg.train.sampler,
                     seeds=list(range(seed, seed + seeds)))
    write_rows(out, ABLATION_HEADER, rows)
    click.echo(f"{out}: {len(rows)} ratios")


@cli.command()
@click.option("--data", type=EXISTING, required=True, help="dataset or prediction file")
@click.option("--out", type=OUTPUT, required=True)
@click.option("--limit", type=click.IntRange(min=0), default=16, show_default=True)
@click.option("--columns", type=click.IntRange(min=1), default=4, show_default=True)
def render(data, out, limit, columns):
    """Draw the first LIMIT sets as SVG scatter panels."""
    examples = read_dataset(data)[:limit]
    viewport = task_info(dataset_task(examples)).viewport if examples else None
    render_svg([e.target for e in examples], out, viewport, columns=columns)
    click.echo(f"{out}: {len(examples)} panels")


@cli.command()
@click.option("--ckpt", type=EXISTING, required=True)
@click.option("--task", type=click.Choice(["polygons", "digits"]), required=True)
@click.option("--n", "size", type=click.IntRange(min=3), default=5, show_default=True, help="polygon input")
@click.option("--k", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--out", type=OUTPUT, required=True, help="JSON report")
@click.option("--svg", type=OUTPUT, default=None, help="also draw every prediction")
@click.option("--config", "config_path", type=EXISTING, default=None, help="sampler schedule (train.sampler)")
def multimodal(ckpt, task, size, k, seed, out, svg, config_path):
    """K seeded predictions per input: rotation spread or writing-style histogram."""
    max_size = task_info(task).max_size
    if task == "polygons" and size > max_size:
        raise click.BadParameter(f"{size} exceeds the largest polygon ({max_size})", param_hint="--n")
    checkpoint = load_checkpoint(ckpt)
    if not checkpoint.is_energy:
        raise ContractError("multi-modality reports need an energy checkpoint")
    cfg = _run_config(config_path, task)
    report = multimodal_report(checkpoint.model, task, n=size, k=k, seed=seed, sampler=cfg.train.sampler)
    if svg:
        sets = [s for entry in report["inputs"].values() for s in entry["sets"]]
        render_svg(sets, svg, task_info(task).viewport)
    out.write_bytes(orjson.dumps(report, option=orjson.OPT_SERIALIZE_NUMPY | orjson.OPT_INDENT_2))
    for name, entry in report["inputs"].items():
        summary = entry.get("circular_std", entry.get("styles"))
        click.echo(f"{task} {name}: {summary}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI; returns 0 on success, 1 on usage or config errors, 2 on runtime errors."""
    try:
        rv = cli.main(args=list(argv) if argv is not None else None, prog_name="desp", standalone_mode=False)
    except click.UsageError as exc:
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        click.echo(f"Error: {exc.format_message()}", err=True)
        return 1
    except ConfigError as exc:
        click.echo(f"Error: {exc}", err=True)
        return 1
    except click.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except (DespError, OSError, click.ClickException) as exc:
        click.echo(f"Error: {exc}", err=True)
        return 2
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(main())
