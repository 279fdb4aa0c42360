"""Command-line entry point: ``cdvae-vc generate|train|convert|evaluate|probe|plot``.

Everything that affects results comes from a TOML config file; flags only
choose paths, the seed and whether existing outputs may be replaced.  Every
artifact carries the config hash and seed.  Failures print one line,
``error: <code>: <message>``, and exit non-zero.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import conversion as cv
from . import evaluation as ev
from . import features as ft
from . import toyvoc as tv
from . import training as tr
from .model import ArchConfig, UnknownSpeakerError

log = logging.getLogger("cdvae_vc")

# model-section keys; dims shared with training come from [train]
MODEL_KEYS = ("variant", "f0_conditioning", "conv_channels", "conv_kernel", "freq_strides", "hidden_dims",
              "leaky_slope", "speaker_init_scale")
EVAL_KEYS = ("pairs", "path", "f0_mode", "split", "probe_split", "probe")
CORPUS_KEYS = ("source", "path")
TOP_KEYS = ("seed", "output_dir", "corpus", "model", "train", "eval")


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    corpus: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    # -- typed views ------------------------------------------------------

    def toy_spec(self) -> tv.ToyCorpusSpec:
        return tv.ToyCorpusSpec.from_dict({k: v for k, v in self.corpus.items() if k not in CORPUS_KEYS})

    def train_config(self) -> tr.TrainConfig:
        d = dict(self.train)
        d["seed"] = self.seed
        d["variant"] = self.model.get("variant", "fcn")
        d["f0_conditioning"] = self.model.get("f0_conditioning", False)
        return tr.TrainConfig.from_dict(d)

    def arch_overrides(self) -> dict:
        return {k: v for k, v in self.model.items() if k not in ("variant", "f0_conditioning")}

    def probe_config(self) -> ev.ProbeConfig:
        return ev.ProbeConfig.from_dict({**self.eval.get("probe", {}), "seed": self.seed})

    def resolved(self) -> dict:
        """Fully defaulted config, the input to the hash."""
        train = self.train_config()
        out = {
            "seed": self.seed,
            "corpus": dict(self.corpus),
            "model": {"variant": train.variant, "f0_conditioning": train.f0_conditioning,
                      **{k: v for k, v in train.arch(**self.arch_overrides()).to_dict().items()
                         if k in MODEL_KEYS}},
            "train": train.to_dict(),
            "eval": {
                "pairs": self.eval.get("pairs"),
                "path": self.eval.get("path", cv.DEFAULT_PATH),
                "f0_mode": self.eval.get("f0_mode", "linear-mean-variance"),
                "split": self.eval.get("split", "test"),
                "probe_split": self.eval.get("probe_split", "train"),
                "probe": self.probe_config().to_dict(),
            },
        }
        if self.corpus.get("source", "toy") == "toy":
            out["corpus"] = {"source": "toy", **self.toy_spec().to_dict()}
        return json.loads(json.dumps(out))

    def hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.hash(), "seed": self.seed, "config": self.resolved()}


def _type_errors(section: str, cls, values: dict, errors: list[str]) -> None:
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    for key, value in values.items():
        if key not in defaults:
            continue
        default = defaults[key]
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(default, str):
            ok = isinstance(value, str)
        elif isinstance(default, tuple):
            ok = isinstance(value, list)
        else:
            ok = True
        if not ok:
            errors.append(f"{section}.{key}: expected {type(default).__name__}, got {type(value).__name__}")


def validate_config(raw: dict) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig`, reporting every problem at once."""
    errors: list[str] = []
    for key in raw:
        if key not in TOP_KEYS:
            errors.append(f"unknown key '{key}'")
    sections = {}
    for name in ("corpus", "model", "train", "eval"):
        value = raw.get(name, {})
        if not isinstance(value, dict):
            errors.append(f"'{name}' must be a table")
            value = {}
        sections[name] = value

    corpus = sections["corpus"]
    source = corpus.get("source", "toy")
    if source == "toy":
        allowed = set(CORPUS_KEYS) | {f.name for f in dataclasses.fields(tv.ToyCorpusSpec)}
        _type_errors("corpus", tv.ToyCorpusSpec, corpus, errors)
    elif source == "dir":
        allowed = set(CORPUS_KEYS)
        if not isinstance(corpus.get("path"), str):
            errors.append("corpus.path: required (string) when source = 'dir'")
    else:
        allowed = set(CORPUS_KEYS)
        errors.append(f"corpus.source: expected 'toy' or 'dir', got {source!r}")
    errors += [f"unknown key 'corpus.{k}'" for k in corpus if k not in allowed]

    model = sections["model"]
    errors += [f"unknown key 'model.{k}'" for k in model if k not in MODEL_KEYS]
    _type_errors("model", ArchConfig, model, errors)

    train = sections["train"]
    train_keys = {f.name for f in dataclasses.fields(tr.TrainConfig)} - {"seed", "variant", "f0_conditioning"}
    for k in train:
        if k in ("seed", "variant", "f0_conditioning"):
            errors.append(f"train.{k}: set this at top level ('seed') or in [model]")
        elif k not in train_keys:
            errors.append(f"unknown key 'train.{k}'")
    _type_errors("train", tr.TrainConfig, train, errors)

    evals = sections["eval"]
    errors += [f"unknown key 'eval.{k}'" for k in evals if k not in EVAL_KEYS]
    probe = evals.get("probe", {})
    if not isinstance(probe, dict):
        errors.append("'eval.probe' must be a table")
    else:
        errors += [f"unknown key 'eval.probe.{k}'" for k in probe
                   if k not in {f.name for f in dataclasses.fields(ev.ProbeConfig)} or k == "seed"]
        _type_errors("eval.probe", ev.ProbeConfig, probe, errors)
    pairs = evals.get("pairs")
    if pairs is not None and not (isinstance(pairs, list) and all(
            isinstance(p, list) and len(p) == 2 and all(isinstance(s, str) for s in p) for p in pairs)):
        errors.append("eval.pairs: expected a list of [source, target] speaker pairs")
    if "path" in evals and evals["path"] not in cv.PATHS:
        errors.append(f"eval.path: expected one of {sorted(cv.PATHS)}")
    if "f0_mode" in evals and evals["f0_mode"] not in cv.F0_MODES:
        errors.append(f"eval.f0_mode: expected one of {list(cv.F0_MODES)}")

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errors.append("seed: expected a non-negative integer")
    if not isinstance(raw.get("output_dir", ""), str):
        errors.append("output_dir: expected a string")

    if errors:
        raise CliError("config", "; ".join(errors))
    cfg = ExperimentConfig(seed=seed, output_dir=raw.get("output_dir", "runs/default"), **sections)
    # value checks that need the typed objects
    try:
        cfg.resolved()
    except (ValueError, TypeError) as exc:
        raise CliError("config", str(exc)) from None
    return cfg


def load_config(path, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise CliError("not-found", f"config not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise CliError("config", f"{path}: {exc}") from None
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = out
    return validate_config(raw)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _fresh_dir(path: Path, overwrite: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise CliError("exists", f"output already exists: {path} (pass --overwrite to replace it)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    ft.atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def corpus_utterances(cfg: ExperimentConfig) -> list[ft.UtteranceFeatures]:
    if cfg.corpus.get("source", "toy") == "dir":
        directory = Path(cfg.corpus["path"])
        if not directory.exists():
            raise CliError("not-found", f"corpus directory not found: {directory}")
        return tv.load_corpus(directory)
    return tv.generate_corpus(cfg.toy_spec())


def _checkpoint(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise CliError("not-found", f"checkpoint not found: {path}")
    return path


def _pairs(cfg: ExperimentConfig, cli_pairs, speakers) -> list[tuple[str, str]]:
    if cli_pairs:
        out = []
        for p in cli_pairs:
            src, sep, tgt = p.partition(":")
            if not sep or not src or not tgt:
                raise CliError("usage", f"--pair expects SOURCE:TARGET, got {p!r}")
            out.append((src, tgt))
        return out
    if cfg.eval.get("pairs"):
        return [tuple(p) for p in cfg.eval["pairs"]]
    return [(a, b) for a in speakers for b in speakers if a != b]


def _split_filter(utts, split):
    return [u for u in utts if split is None or u.meta.get("split", "train") == split]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, args) -> Path:
    if cfg.corpus.get("source", "toy") != "toy":
        raise CliError("config", "generate needs corpus.source = 'toy'")
    out = _fresh_dir(Path(cfg.output_dir) / "corpus", args.overwrite)
    spec = cfg.toy_spec()
    tv.write_corpus(tv.generate_corpus(spec), out, spec, extra={"provenance": cfg.provenance()})
    return out


def cmd_train(cfg: ExperimentConfig, args) -> Path:
    out = Path(cfg.output_dir) / "train"
    if args.resume:
        _checkpoint(args.resume)
        out.mkdir(parents=True, exist_ok=True)
    else:
        _fresh_dir(out, args.overwrite)
    prov = cfg.provenance()
    _write_json(out / "config.json", prov)
    result = tr.train(cfg.train_config(), corpus_utterances(cfg), out, arch_overrides=cfg.arch_overrides(),
                      resume_from=args.resume, provenance=prov)
    final = result.checkpoints[-1]
    _write_json(out / "final.json", {"checkpoint": final.name, "sha256": tr.file_sha256(final),
                                     "provenance": {k: prov[k] for k in ("config_hash", "seed")}})
    return final


def cmd_convert(cfg: ExperimentConfig, args) -> Path:
    ckpt = _checkpoint(args.checkpoint)
    model = tr.model_from_checkpoint(ckpt)
    utts = corpus_utterances(cfg)
    ev_cfg = cfg.resolved()["eval"]
    pairs = _pairs(cfg, args.pair, sorted({u.speaker for u in utts}))
    train_utts = tr.training_utterances(utts) or utts
    speakers = {s for p in pairs for s in p}
    stats = {s: ft.f0_statistics([u for u in train_utts if u.speaker == s], speaker=s)
             for s in speakers if any(u.speaker == s for u in train_utts)}
    out = _fresh_dir(Path(cfg.output_dir) / "convert" / ckpt.stem, args.overwrite)
    prov = cfg.provenance()
    prov_short = {"config_hash": prov["config_hash"], "seed": prov["seed"], "checkpoint": ckpt.name}
    pool = _split_filter(utts, ev_cfg["split"])
    count = 0
    for src_spk, tgt_spk in pairs:
        model.speaker_index(tgt_spk)
        for utt in (u for u in pool if u.speaker == src_spk):
            spec = cv.ConversionSpec(utt, tgt_spk, ev_cfg["path"], ev_cfg["f0_mode"])
            converted = cv.convert(model, spec, stats.get(src_spk), stats.get(tgt_spk))
            converted.meta["provenance"] = prov_short
            name = utt.meta.get("utt_id", f"utt{count:05d}")
            cv.export_for_synthesis(converted, out / f"{src_spk}_to_{tgt_spk}" / f"{name}.feat")
            count += 1
    if count == 0:
        raise CliError("evaluation", "no source utterances matched the requested pairs and split")
    _write_json(out / "provenance.json", {**prov, "checkpoint": ckpt.name, "n_converted": count})
    return out


def _systems(specs) -> dict:
    systems = {}
    for item in specs:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        if name in systems:
            raise CliError("usage", f"duplicate system name {name!r}")
        systems[name] = tr.model_from_checkpoint(_checkpoint(path))
    return systems


def cmd_evaluate(cfg: ExperimentConfig, args) -> Path:
    systems = _systems(args.checkpoint)
    utts = corpus_utterances(cfg)
    ev_cfg = cfg.resolved()["eval"]
    pairs = _pairs(cfg, args.pair, sorted({u.speaker for u in utts}))
    report = ev.evaluate_pairwise(systems, utts, pairs, ev_cfg["path"], ev_cfg["split"], ev_cfg["f0_mode"],
                                  probe=cfg.probe_config() if args.probe else None,
                                  probe_split=ev_cfg["probe_split"])
    report.meta["provenance"] = cfg.provenance()
    report.meta["checkpoints"] = list(args.checkpoint)
    out = _fresh_dir(Path(cfg.output_dir) / "eval", args.overwrite)
    _write_json(out / "report.json", report.to_dict())
    ft.atomic_write_text(out / "report.txt", report.tables() + f"\nconfig {report.meta['provenance']['config_hash']}"
                         f" seed {cfg.seed}\n")
    return out


def cmd_probe(cfg: ExperimentConfig, args) -> Path:
    ckpt = _checkpoint(args.checkpoint)
    model = tr.model_from_checkpoint(ckpt)
    ev_cfg = cfg.resolved()["eval"]
    utts = _split_filter(corpus_utterances(cfg), ev_cfg["probe_split"])
    src_dom, _ = cv.parse_path(ev_cfg["path"])
    probe_cfg = cfg.probe_config()
    targets = ev.probe_targets(utts, per_speaker=probe_cfg.standardize == "speaker")
    result = ev.train_f0_probe(ev.extract_latents(model, utts, src_dom), targets, probe_cfg)
    out = _fresh_dir(Path(cfg.output_dir) / "probe" / ckpt.stem, args.overwrite)
    _write_json(out / "probe.json", {**result.to_dict(), "checkpoint": ckpt.name, "domain": src_dom,
                                     "probe_config": probe_cfg.to_dict(), "provenance": cfg.provenance()})
    return out


def _read_curves(path: Path) -> tuple[str, dict[str, list[float]]]:
    if path.suffix == ".jsonl":
        rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        keys = ("l_in", "l_cross", "l_kld", "l_sim", "total")
        return "training loss", {k: [r[k] for r in rows] for k in keys if rows and k in rows[0]}
    data = json.loads(path.read_text())
    if "mse_curve" in data:
        return "F0 probe training loss", {"cont-F0 MSE": data["mse_curve"], "uv CE": data["bce_curve"]}
    if "probes" in data:
        curves = {}
        for system, p in data["probes"].items():
            curves[f"{system} cont-F0 MSE"] = p["mse_curve"]
        return "F0 probe training loss", curves
    raise CliError("format", f"{path}: not a loss log, probe result or report")


def cmd_plot(cfg: ExperimentConfig | None, args) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    base = Path(args.out) if args.out else Path(cfg.output_dir if cfg else ".")
    out = _fresh_dir(base / "plots", args.overwrite)
    for i, name in enumerate(args.inputs):
        path = Path(name)
        if not path.exists():
            raise CliError("not-found", f"input not found: {path}")
        stem = f"{i:02d}_{path.parent.name}_{path.stem}"
        if path.suffix == ".json" and "entries" in (data := json.loads(path.read_text())):
            report = ev.EvalReport([ev.PairEntry(**e) for e in data["entries"]], data["averages"],
                                   data["probes"], data["meta"])
            ft.atomic_write_text(out / f"{stem}.txt", report.tables() + "\n")
            if not report.probes:
                continue
        title, curves = _read_curves(path)
        fig, ax = plt.subplots(figsize=(7, 4))
        for label, ys in curves.items():
            ax.plot(range(len(ys)), ys, label=label, linewidth=1)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_title(title)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / f"{stem}.png", dpi=100, metadata={"Software": None})
        plt.close(fig)
    return out


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "convert": cmd_convert,
    "evaluate": cmd_evaluate,
    "probe": cmd_probe,
    "plot": cmd_plot,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdvae-vc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment TOML file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("generate", help="write the toy corpus"))
    p = common(sub.add_parser("train", help="train one system"))
    p.add_argument("--resume", help="checkpoint to continue from")
    p = common(sub.add_parser("convert", help="convert test utterances and export features"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pair", action="append", help="SOURCE:TARGET, repeatable")
    p = common(sub.add_parser("evaluate", help="MCD and latent distances over speaker pairs"))
    p.add_argument("--checkpoint", action="append", required=True, help="[NAME=]PATH, repeatable")
    p.add_argument("--pair", action="append", help="SOURCE:TARGET, repeatable")
    p.add_argument("--probe", action="store_true", help="also train the F0 probe per system")
    p = common(sub.add_parser("probe", help="train the F0 probe on one system's latents"))
    p.add_argument("--checkpoint", required=True)
    p = common(sub.add_parser("plot", help="plot loss logs, probe results and reports"), config_required=False)
    p.add_argument("inputs", nargs="+", help="losses.jsonl, probe.json or report.json files")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = load_config(args.config, args.seed, args.out) if args.config else None
        result = COMMANDS[args.command](cfg, args)
        print(result)
        return 0
    except CliError as exc:
        code, message = exc.code, str(exc)
    except FileNotFoundError as exc:
        code, message = "not-found", str(exc)
    except ft.FeatureFormatError as exc:
        code, message = "format", str(exc)
    except UnknownSpeakerError as exc:
        code, message = "speaker", exc.args[0] if exc.args else str(exc)
    except ev.EvaluationError as exc:
        code, message = "evaluation", str(exc)
    except tr.TrainingDivergedError as exc:
        code, message = "diverged", str(exc)
    except (ft.ConfigurationError, ft.FeatureError) as exc:
        code, message = "invalid", str(exc)
    print(f"error: {code}: {' '.join(message.split())}", file=sys.stderr)
    return 2 if code in ("usage", "config") else 1


if __name__ == "__main__":
    sys.exit(main())
