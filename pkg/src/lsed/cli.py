"""``lsed`` command line: train, encode, verify, identify, bench, experiment.

Every command reads a ``key = value`` config file (``--config``); ``--seed``,
``--threads`` and ``--out`` override the matching keys. Set ``LSED_LOG`` to a
logging level name (``INFO``, ``DEBUG``...) for progress messages.

Corpus directories hold ``.pgm`` or ``.lsk1`` images; an image's identity is
the part of its file name before the first underscore.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as lio
from .descriptors import lsed_descriptor
from .dictionary import KsvdConfig, SannConfig, em_train, ksvd_fit, sann_train
from .encoding import L1EncoderConfig, make_encoder
from .evaluation import (
    HolisticSrPipeline,
    LsedPipeline,
    SyntheticClassConfig,
    harvest_patch_features,
    make_synthetic_corpus,
    make_trials,
    robustness_table,
    run_identification,
    run_robustness_grid,
    run_synthetic_class_experiment,
    run_timing_bench,
    split_identities,
)
from .imaging import PatchGridConfig, SynthParams
from .matching import CohortSet, IncompatibleDescriptors, cohort_normalized_score, raw_distance, score_rows_to_csv

log = logging.getLogger("lsed")

IMAGE_SUFFIXES = (".pgm", ".lsk1")


class UsageError(Exception):
    """Bad configuration or missing input; reported without a traceback."""


# --- configuration ------------------------------------------------------------


def parse_config(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; later keys win."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"config line {n}: empty key")
        out[key] = value
    return out


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    return parse_config(path.read_text())


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(float(v) for v in value.replace(",", " ").split())
    return value


def build_dataclass(cls, conf: dict, prefix: str = "", **fixed):
    """Fill ``cls`` fields from ``prefix``-ed config keys, falling back to defaults."""
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key in conf:
            default = f.default if f.default is not dataclasses.MISSING else ""
            try:
                kwargs[f.name] = _coerce(conf[key], default)
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {conf[key]!r}") from exc
    kwargs.update(fixed)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from exc


def _get(conf, key, cast=str, default=None, required=False):
    if key not in conf:
        if required:
            raise UsageError(f"config key {key!r} is required")
        return default
    try:
        return cast(conf[key])
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {conf[key]!r}") from exc


def _path(conf, key, required=True):
    p = _get(conf, key, required=required)
    if p is None:
        return None
    p = Path(p)
    if not p.exists():
        raise UsageError(f"{key}: path does not exist: {p}")
    return p


# --- corpora ------------------------------------------------------------------


def identity_of(path: Path) -> str:
    return path.stem.split("_", 1)[0]


def list_images(directory: Path) -> list:
    if not directory.is_dir():
        raise UsageError(f"corpus directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise UsageError(f"no .pgm or .lsk1 images in {directory}")
    return files


def load_corpus(conf: dict, seed: int):
    """Images and labels from ``corpus`` (a directory or ``synthetic``)."""
    source = _get(conf, "corpus", required=True)
    if source == "synthetic":
        corpus = make_synthetic_corpus(
            _get(conf, "synthetic_identities", int, 20),
            _get(conf, "synthetic_variations", int, 4),
            build_dataclass(SynthParams, conf, "synthetic_"),
            seed=_get(conf, "corpus_seed", int, 0),
        )
        return corpus.images, corpus.labels
    files = list_images(Path(source))
    try:
        images = [lio.read_image(f) for f in files]
    except (OSError, lio.FormatError) as exc:
        raise UsageError(f"unreadable corpus image: {exc}") from exc
    return images, np.array([identity_of(f) for f in files])


def grid_config(conf) -> PatchGridConfig:
    return build_dataclass(PatchGridConfig, conf, "grid_")


def load_encoder(conf):
    path = _path(conf, "model")
    try:
        model = lio.load_model(path)
    except lio.FormatError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    return make_encoder(model, build_dataclass(L1EncoderConfig, conf, "l1_"))


def _load_descriptors(paths):
    out = []
    for p in paths:
        try:
            out.append(lio.load_descriptor(p))
        except (OSError, lio.FormatError) as exc:
            raise UsageError(f"unreadable descriptor {p}: {exc}") from exc
    return out


def _descriptor_files(conf, key):
    p = _path(conf, key)
    if p.is_dir():
        files = sorted(p.glob("*.lskd"))
        if not files:
            raise UsageError(f"no .lskd descriptors in {p}")
        return files
    return [p]


# --- commands -----------------------------------------------------------------


def cmd_train(conf, out: Path):
    if "seed" not in conf:
        raise UsageError("training needs a seed (--seed or seed = ... in the config)")
    seed = int(conf["seed"])
    images, _ = load_corpus(conf, seed)
    feats = harvest_patch_features(images, grid_config(conf), _get(conf, "max_patches", int, 20_000), seed)
    kind = _get(conf, "encoder", default="gmm")
    n_codes = _get(conf, "n_codes", int, 64)
    history: list = []
    if kind == "gmm":
        model = em_train(feats, n_codes, seed=seed, max_iters=_get(conf, "max_iters", int, 100), history=history)
    elif kind == "sann":
        model = sann_train(feats, build_dataclass(SannConfig, conf, "sann_", hidden_units=n_codes, seed=seed), history)
    elif kind == "l1":
        res = ksvd_fit(feats, build_dataclass(KsvdConfig, conf, "ksvd_", num_atoms=n_codes, seed=seed))
        model, history = res.dictionary, res.history
    else:
        raise UsageError(f"unknown encoder kind {kind!r}; use gmm, sann or l1")
    path = out / _get(conf, "model_name", default="model.lskm")
    lio.save_model(path, model)
    print(f"trained {kind} model with {n_codes} codes on {feats.shape[0]} patches")
    for i, v in enumerate(history):
        print(f"iter {i:4d}  {v!r}")
    print(f"wrote {path}")
    return 0


def cmd_encode(conf, out: Path, threads: int):
    encoder = load_encoder(conf)
    grid = grid_config(conf)
    src = _path(conf, "input")
    files = list_images(src) if src.is_dir() else [src]
    for f in files:
        desc = lsed_descriptor(lio.read_image(f), encoder, grid, threads=threads)
        lio.save_descriptor(out / (f.stem + ".lskd"), desc)
    print(f"encoded {len(files)} image(s) into {out}")
    return 0


def _scorer(conf):
    if "cohort" not in conf:
        return raw_distance
    cohorts = CohortSet(tuple(_load_descriptors(_descriptor_files(conf, "cohort"))))
    return lambda a, b: cohort_normalized_score(a, b, cohorts)


def cmd_verify(conf, out: Path):
    probes = _descriptor_files(conf, "probe")
    gallery = _descriptor_files(conf, "gallery")
    tau = _get(conf, "tau", float, 0.0)
    score = _scorer(conf)
    pdesc, gdesc = _load_descriptors(probes), _load_descriptors(gallery)
    rows = []
    for pf, p in zip(probes, pdesc):
        for gf, g in zip(gallery, gdesc):
            rows.append((pf.stem, gf.stem, score(p, g)))
    text = score_rows_to_csv(rows, tau)
    (out / "scores.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_identify(conf, out: Path):
    gallery = _descriptor_files(conf, "gallery")
    probes = _descriptor_files(conf, "probe")
    gdesc, pdesc = _load_descriptors(gallery), _load_descriptors(probes)
    glabels = np.array([identity_of(f) for f in gallery])
    plabels = np.array([identity_of(f) for f in probes])
    rows = []
    for pf, p in zip(probes, pdesc):
        dists = [raw_distance(p, g) for g in gdesc]
        k = int(np.argmin(dists))
        rows.append((pf.stem, gallery[k].stem, dists[k]))
    text = score_rows_to_csv(rows)
    (out / "identification.csv").write_text(text)
    sys.stdout.write(text)
    if set(plabels) <= set(glabels):
        rate, _ = run_identification(gdesc, glabels, pdesc, plabels, "lsed_nn")
        print(f"rank-1 rate {rate:.4f}")
    return 0


def cmd_bench(conf, out: Path, threads: int):
    seed = _get(conf, "seed", int, 0)
    n_codes = _get(conf, "n_codes", int, 256)
    corpus = make_synthetic_corpus(_get(conf, "synthetic_identities", int, 10), 2, seed=seed)
    feats = harvest_patch_features(corpus.images, max_patches=_get(conf, "max_patches", int, 5000), seed=seed)
    l1_model = ksvd_fit(feats, KsvdConfig(num_atoms=n_codes, seed=seed, max_iters=_get(conf, "ksvd_max_iters", int, 5))).dictionary
    sann_model = sann_train(feats, SannConfig(hidden_units=n_codes, seed=seed, max_epochs=_get(conf, "sann_max_epochs", int, 50)))
    encoders = {"sann": make_encoder(sann_model), "l1": make_encoder(l1_model, build_dataclass(L1EncoderConfig, conf, "l1_"))}
    sizes = tuple(int(s) for s in _get(conf, "gallery_sizes", default="50 100 200 400").replace(",", " ").split())
    report = run_timing_bench(encoders, corpus.images, sizes, repeats=_get(conf, "repeats", int, 20), seed=seed)
    text = report.summary() + f"\nsann/l1 speed-up: {report.ratio('l1', 'sann'):.1f}x\n"
    (out / "bench.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_experiment(conf, out: Path, name: str, threads: int):
    if name == "synthetic-class":
        cfg = build_dataclass(SyntheticClassConfig, conf)
        text = run_synthetic_class_experiment(cfg).to_csv()
        (out / "synthetic_class.csv").write_text(text)
    elif name == "robustness":
        seed = _get(conf, "seed", int, 0)
        corpus = make_synthetic_corpus(
            _get(conf, "synthetic_identities", int, 100), _get(conf, "synthetic_variations", int, 6), seed=seed
        )
        train, test = split_identities(corpus, _get(conf, "train_identities", int, 40), seed)
        ctr, cte = corpus.subset(train), corpus.subset(test)
        trials = make_trials(cte.labels, _get(conf, "folds", int, 5), _get(conf, "pairs_per_fold", int, 60), seed + 1)
        pipe = LsedPipeline(
            _get(conf, "encoder", default="gmm"),
            n_codes=_get(conf, "n_codes", int, 64),
            n_cohorts=_get(conf, "cohorts", int, 32),
            seed=seed,
            max_patches=_get(conf, "max_patches", int, 10_000),
            threads=threads,
        ).fit(ctr.images, ctr.labels)
        tables = {"lsed": run_robustness_grid(cte, pipe, trials)}
        if _get(conf, "with_holistic", int, 0):
            tables["holistic_sr"] = run_robustness_grid(cte, HolisticSrPipeline().fit(ctr.images), trials)
        lines = ["pipeline,kind,magnitude,accuracy"]
        for label, table in tables.items():
            lines += [f"{label},{row}" for row in robustness_table(table).splitlines()[1:]]
        text = "\n".join(lines) + "\n"
        (out / "robustness.csv").write_text(text)
    else:
        raise UsageError(f"unknown experiment {name!r}; use synthetic-class or robustness")
    sys.stdout.write(text)
    return 0


# --- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsed", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="random seed (required for training)")
    common.add_argument("--threads", type=int, default=None, help="patch-encoding threads (default 1)")
    common.add_argument("--out", default=".", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("train", "train an encoder model on a corpus"),
        ("encode", "write descriptors for images"),
        ("verify", "score probe descriptors against gallery descriptors"),
        ("identify", "nearest-neighbour identification"),
        ("bench", "timing benchmark"),
    ):
        sub.add_parser(name, parents=[common], help=text)
    exp = sub.add_parser("experiment", parents=[common], help="run an experiment harness")
    exp.add_argument("name", choices=("synthetic-class", "robustness"))
    return parser


def main(argv=None) -> int:
    level = os.environ.get("LSED_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        conf = load_config(args.config)
        if args.seed is not None:
            conf["seed"] = str(args.seed)
        threads = args.threads if args.threads is not None else _get(conf, "threads", int, 1)
        if threads < 1:
            raise UsageError("--threads must be at least 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "train":
            return cmd_train(conf, out)
        if args.command == "encode":
            return cmd_encode(conf, out, threads)
        if args.command == "verify":
            return cmd_verify(conf, out)
        if args.command == "identify":
            return cmd_identify(conf, out)
        if args.command == "bench":
            return cmd_bench(conf, out, threads)
        return cmd_experiment(conf, out, args.name, threads)
    except UsageError as exc:
        print(f"lsed: error: {exc}", file=sys.stderr)
        return 2
    except IncompatibleDescriptors as exc:
        print(f"lsed: incompatible descriptors: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
