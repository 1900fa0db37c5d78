"""Command-line entry point.

Exit codes: 0 success, 2 environment or input error (missing or unreadable
files, bad config), 3 data error (empty class, missing scale, unmatched
patch ids).  Config files are flat ``key=value``; flags override them.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

from PIL import UnidentifiedImageError

from . import cascade as cc
from .backbone import EmptyClassError, TrainConfig, save_model
from .config import apply_kv, format_value, load_kv
from .dataset import (Manifest, ManifestError, PatchRecord, PolypLabel,
                      class_distribution, patch_id_for, read_manifest, split_slides,
                      write_manifest)
from .experiment import (TASKS, Corpus, MissingScaleError, dump_json, evaluate_predictions,
                         sweep, sweep_text, train_task)
from .metrics import MetricsError, plot_confusion, report_text, write_report
from .scalespace import SCANNER_MPP, ScaleSpec, crop, read_png, scale_to_pixels, tile_grid, write_png
from .synth import SynthConfig, synth_generate

log = logging.getLogger("polypcascade")

EXIT_OK, EXIT_INPUT, EXIT_DATA = 0, 2, 3
IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg")


class InputError(Exception):
    """Missing or unreadable input; exit code 2."""


class DataError(Exception):
    """Inputs readable but semantically unusable; exit code 3."""


# -- dataclass-backed option groups ----------------------------------------

def _flat_defaults(obj, prefix: str = "") -> dict[str, object]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(_flat_defaults(value, f"{prefix}{f.name}_"))
        else:
            out[prefix + f.name] = value
    return out


def _add_fields(parser, obj, title: str) -> None:
    group = parser.add_argument_group(title)
    for key, default in _flat_defaults(obj).items():
        group.add_argument("--" + key.replace("_", "-"), dest="kv_" + key, metavar="V",
                           default=argparse.SUPPRESS,
                           help=f"(default: {format_value(default)})")


def _resolve(obj, args, config_path: str | None):
    """Defaults, then the config file, then explicit flags."""
    values: dict[str, str] = {}
    if config_path:
        try:
            values.update(load_kv(config_path))
        except FileNotFoundError:
            raise InputError(f"config file not found: {config_path}") from None
        except ValueError as exc:
            raise InputError(f"{config_path}: {exc}") from None
    values.update({k[3:]: v for k, v in vars(args).items() if k.startswith("kv_")})
    nested = {f.name for f in dataclasses.fields(obj)
              if dataclasses.is_dataclass(getattr(obj, f.name))}
    try:
        inner = {}
        for name in nested:
            sub = {k[len(name) + 1:]: values.pop(k) for k in list(values)
                   if k.startswith(name + "_")}
            inner[name] = apply_kv(getattr(obj, name), sub)
        obj = dataclasses.replace(obj, **inner)
        return apply_kv(obj, values)
    except (KeyError, ValueError) as exc:
        raise InputError(f"bad configuration: {exc}") from None


def _explicit(args, config_path: str | None, key: str) -> bool:
    if hasattr(args, "kv_" + key):
        return True
    return bool(config_path) and key in load_kv(config_path)


def _manifest(path: str) -> Manifest:
    try:
        return read_manifest(path)
    except FileNotFoundError:
        raise InputError(f"manifest not found: {path}") from None
    except (ManifestError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _corpus(path: str, root: str | None) -> Corpus:
    return Corpus(_manifest(path), root or Path(path).parent)


def _text_path(json_path: Path) -> Path:
    return json_path.with_suffix(".txt")


# -- commands --------------------------------------------------------------

def cmd_extract(args) -> int:
    src = Path(args.input_dir)
    if not src.is_dir():
        raise InputError(f"input directory not found: {src}")
    out = Path(args.out)
    side = scale_to_pixels(ScaleSpec(args.scale_um, args.mpp))
    records: list[PatchRecord] = []
    slide_labels: dict[str, PolypLabel] = {}
    for path in sorted(p for p in src.glob("*/*") if p.suffix.lower() in IMAGE_SUFFIXES):
        try:
            label = PolypLabel.parse(path.parent.name)
        except ValueError:
            log.warning("skipping %s: %r is not a class directory", path, path.parent.name)
            continue
        try:
            img = read_png(path)
        except (OSError, UnidentifiedImageError) as exc:
            raise InputError(f"cannot read {path}: {exc}") from None
        sid = path.stem
        if sid in slide_labels and slide_labels[sid] is not label:
            raise DataError(f"slide {sid} appears under two labels")
        slide_labels[sid] = label
        grid = tile_grid(img.shape[1], img.shape[0], side)
        if not len(grid):
            log.warning("%s (%dx%d px) is smaller than one %d px tile", path,
                        img.shape[1], img.shape[0], side)
        scale_dir = format_value(float(args.scale_um))
        for x, y in grid:
            pid = patch_id_for(sid, args.scale_um, x, y)
            rel = f"{label.value}/{sid}/{scale_dir}/{pid}.png"
            write_png(out / rel, crop(img, (x, y), side))
            records.append(PatchRecord(pid, sid, "train", label, float(args.scale_um),
                                       x, y, side, rel))
    if slide_labels:
        train, _ = split_slides(slide_labels, args.train_fraction, args.seed,
                                labels=slide_labels)
        records = [dataclasses.replace(r, split="train" if r.slide_id in train else "test")
                   for r in records]
    manifest = Manifest(args.mpp, records)
    target = Path(args.manifest) if args.manifest else out / "manifest.csv"
    write_manifest(manifest, target)
    print(f"{len(records)} patches of {side} px from {len(slide_labels)} slides -> {target}")
    print(class_distribution(manifest).format("patches"))
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _resolve(SynthConfig(), args, args.config)
    manifest = synth_generate(cfg, args.out)
    print(f"{len(manifest)} patches, {len(manifest.slides())} slides -> "
          f"{Path(args.out) / 'manifest.csv'}")
    print(class_distribution(manifest, "slide").format("slides"))
    print(class_distribution(manifest).format("patches"))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(TrainConfig(), args, args.config)
    corpus = _corpus(args.manifest, args.root)
    try:
        model = train_task(corpus, args.task, args.scale_um, cfg, args.full_res, args.arch,
                           args.max_per_parent)
    except EmptyClassError as exc:
        raise DataError(f"class {exc.class_name!r} has no training examples") from None
    except MissingScaleError as exc:
        raise DataError(str(exc)) from None
    save_model(model, args.out_model)
    last = model.history[-1] if getattr(model, "history", None) else {}
    print(f"trained {args.task} at {format_value(float(args.scale_um))} um -> {args.out_model}"
          + (f" (train accuracy {last['accuracy']:.3f})" if last else ""))
    return EXIT_OK


def _scales(text: str) -> list[float]:
    try:
        scales = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise InputError(f"bad --scales {text!r}") from None
    if not scales:
        raise InputError("--scales is empty")
    return scales


def cmd_sweep(args) -> int:
    cfg = _resolve(TrainConfig(), args, args.config)
    corpus = _corpus(args.manifest, args.root)
    try:
        result = sweep(corpus, _scales(args.scales), cfg, args.arch, args.max_per_parent,
                       args.models_out)
    except (MissingScaleError, EmptyClassError, MetricsError) as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out_report)
    dump_json(result, out)
    text = sweep_text(result)
    _text_path(out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def _infer_inputs(spec: str, split: str, cfg: cc.CascadeConfig, explicit_mpp: bool):
    """(inputs, cfg): lazily loaded (patch_id, image) pairs for --input."""
    path = Path(spec)
    if not path.exists():
        raise InputError(f"input not found: {spec}")

    def load(p: Path):
        try:
            return read_png(p)
        except (OSError, UnidentifiedImageError) as exc:
            raise InputError(f"cannot read {p}: {exc}") from None

    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        return ((p.stem, load(p)) for p in files), cfg
    if path.suffix.lower() == ".csv":
        manifest = _manifest(spec)
        if not explicit_mpp:
            cfg = dataclasses.replace(cfg, mpp=manifest.mpp)
        recs = manifest.select(split=None if split == "all" else split,
                               scale_um=cfg.sigma_coarse)
        return ((r.patch_id, load(path.parent / r.path)) for r in recs), cfg
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    files = [Path(ln) if Path(ln).is_absolute() else path.parent / ln
             for ln in lines if ln and not ln.startswith("#")]
    return ((p.stem, load(p)) for p in files), cfg


def cmd_infer(args) -> int:
    cfg = _resolve(cc.CascadeConfig(), args, args.config)
    try:
        models = cc.load_models(args.models_dir)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None
    inputs, cfg = _infer_inputs(args.input, args.split, cfg,
                                _explicit(args, args.config, "mpp"))
    try:
        results = [cc.classify_patch(img, models, cfg, pid) for pid, img in inputs]
    except ValueError as exc:
        raise DataError(str(exc)) from None
    cc.write_jsonl(results, args.out)
    print(f"{len(results)} predictions -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        results = cc.read_jsonl(args.predictions)
    except FileNotFoundError:
        raise InputError(f"predictions not found: {args.predictions}") from None
    manifest = _manifest(args.manifest)
    try:
        cm = evaluate_predictions(results, manifest)
        out = Path(args.report)
        write_report(cm, out, _text_path(out))
    except KeyError as exc:
        raise DataError(exc.args[0]) from None
    except MetricsError as exc:
        raise DataError(str(exc)) from None
    if args.plot:
        plot_confusion(cm, args.plot, "cascade")
    print(report_text(cm), end="")
    return EXIT_OK


def plot_sweep(result: dict, path: str | Path) -> Path:
    """BA against scale, one line per row of the sweep table."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    scales = result["scales"]
    xs = [float(s) for s in scales]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for row in ("BA (6-class)", "NORM", "HP", "TA", "TVA"):
        ax.plot(xs, [result["rows"][s][row] for s in scales], marker="o", label=row)
    ax.set_xlabel("scale (um)")
    ax.set_ylabel("balanced accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def cmd_plot(args) -> int:
    from .metrics import ConfusionMatrix

    try:
        data = json.loads(Path(args.input).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"report not found: {args.input}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{args.input}: {exc}") from None
    if "rows" in data and "scales" in data:
        plot_sweep(data, args.out)
    elif "six_class" in data:
        conf = data["per_type" if args.per_type else "six_class"]["confusion"]
        plot_confusion(ConfusionMatrix(tuple(conf["classes"]), conf["counts"]), args.out)
    else:
        raise DataError(f"{args.input} is neither a sweep nor an evaluation report")
    print(f"plot -> {args.out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="polypcascade", description=__doc__.split("\n")[0],
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", formatter_class=fmt,
                       help="tile <label>/<slide_id>.png images into patches")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale-um", type=float, default=800.0)
    p.add_argument("--mpp", type=float, default=SCANNER_MPP)
    p.add_argument("--manifest", default=None, help="manifest path, default <out>/manifest.csv")
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth", formatter_class=fmt, help="generate a synthetic corpus")
    p.add_argument("--config", default=None, help="key=value file")
    p.add_argument("--out", required=True)
    _add_fields(p, SynthConfig(), "generator keys")
    p.set_defaults(func=cmd_synth)

    def corpus_args(q):
        q.add_argument("--manifest", required=True)
        q.add_argument("--root", default=None, help="patch directory, default the manifest's")
        q.add_argument("--config", default=None, help="key=value training file")
        q.add_argument("--arch", default="small_resnet")
        q.add_argument("--max-per-parent", type=int, default=None,
                       help="cap on grid crops drawn per parent patch")
        _add_fields(q, TrainConfig(), "training keys")

    p = sub.add_parser("train", formatter_class=fmt, help="train one classifier")
    corpus_args(p)
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--scale-um", type=float, required=True)
    p.add_argument("--full-res", action="store_true", help="skip the 224 px downsampling")
    p.add_argument("--out-model", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", formatter_class=fmt,
                       help="six-class baseline per scale, BA table")
    corpus_args(p)
    p.add_argument("--scales", default="100,800,1500,4000,7000,8000")
    p.add_argument("--out-report", required=True, help="JSON; a .txt table is written beside it")
    p.add_argument("--models-out", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("infer", formatter_class=fmt, help="run the cascade")
    p.add_argument("--models-dir", required=True, help="holds hp/, adenoma/ and grade/")
    p.add_argument("--input", required=True,
                   help="manifest .csv, directory of images, or a text list of image paths")
    p.add_argument("--split", default="test", choices=("train", "test", "all"),
                   help="manifest split to classify")
    p.add_argument("--config", default=None, help="key=value cascade file")
    p.add_argument("--out", required=True)
    _add_fields(p, cc.CascadeConfig(), "cascade keys")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", formatter_class=fmt, help="score predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True, help="JSON; a .txt table is written beside it")
    p.add_argument("--plot", default=None, help="confusion-matrix PNG")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", formatter_class=fmt, help="plot a sweep or evaluation report")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-type", action="store_true", help="collapse to the four types")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: typing.Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
