"""Command line entry point: ``diarclust <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from diarclust.core_io import (
    FormatError,
    RecordingEmbeddings,
    atomic_write_text,
    format_embeddings,
    format_rttm,
    read_embeddings,
    read_rttm,
    uniform_segments,
)
from diarclust.derscore import DerReport, compute_der, format_report
from diarclust.pipeline import MODES, PRESETS, PipelineConfig, RecordingResult, load_config, run_recording
from diarclust.plda import fit_plda, load_plda, save_plda
from diarclust.preprocess import (
    fit_whitening,
    length_normalize,
    load_whitening,
    preprocess_recording,
    save_pca,
    save_whitening,
)
from diarclust.selfsup import save_metricnet
from diarclust.synth import SynthConfig, make_corpus

logger = logging.getLogger("diarclust")


class CliError(Exception):
    pass


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        entry = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        if record.exc_info:
            entry["exc"] = self.formatException(record.exc_info)
        return json.dumps(entry, sort_keys=True)


def setup_logging(verbosity: int) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING - 10 * min(verbosity, 2))


# -- file helpers --------------------------------------------------------------


def read_labelled_vectors(path) -> tuple[np.ndarray, list[str]]:
    """``<speaker> <v1> ... <vD>`` per line."""
    labels, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            try:
                values = [float(v) for v in fields[1:]]
            except ValueError:
                raise FormatError(path, lineno, "bad number") from None
            if not values or (rows and len(values) != len(rows[0])):
                raise FormatError(path, lineno, "inconsistent vector dimension")
            labels.append(fields[0])
            rows.append(values)
    if not rows:
        raise FormatError(path, None, "no vectors")
    return np.array(rows), labels


def format_labelled_vectors(x: np.ndarray, labels) -> str:
    from diarclust.core_io import format_row

    return "".join(f"{lab} {format_row(row)}\n" for lab, row in zip(labels, x))


def embedding_files(paths: list[str] | None, directory: str | None) -> list[Path]:
    files = [Path(p) for p in paths or []]
    if directory:
        d = Path(directory)
        if not d.is_dir():
            raise CliError(f"embedding directory {d} does not exist")
        files += sorted(d.glob("*.emb"))
    missing = [str(f) for f in files if not f.is_file()]
    if missing:
        raise CliError(f"missing embedding file(s): {', '.join(missing)}")
    if not files:
        raise CliError("no embedding files given")
    return files


def load_dev_matrix(paths: list[str]) -> np.ndarray:
    return np.vstack([read_embeddings(p).matrix for p in paths])


# -- config --------------------------------------------------------------------


def add_config_args(p: argparse.ArgumentParser, default_mode: str | None = None) -> None:
    g = p.add_argument_group("pipeline configuration")
    g.add_argument("--config", help="key = value config file")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--mode", choices=MODES, default=default_mode)
    g.add_argument("--knn", dest="k", type=int)
    g.add_argument("--sigma", type=float)
    g.add_argument("--stop", help="auto | oracle | count:N | eigen:TH | threshold:TH")
    g.add_argument("--score-weight", choices=["sigmoid", "cosine"])
    g.add_argument("--beta", type=float, help="temporal continuity decay")
    g.add_argument("--nb", dest="n_b", type=int, help="temporal continuity lag cap")
    g.add_argument("--pca", help="dims:N or var:F")
    g.add_argument("--ahc-threshold", type=float)
    g.add_argument("--eigen-threshold", type=float)
    g.add_argument("--n0-method", choices=["auto", "ahc", "eigen"])
    g.add_argument("--lr", dest="learning_rate", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--outer-iterations", type=int)
    g.add_argument("--balance-pairs", action="store_const", const=True)
    g.add_argument("--no-length-norm", dest="length_norm", action="store_const", const=False)
    g.add_argument("--seed", type=int)
    g.add_argument("--collar", type=float)
    g.add_argument("--no-overlap", dest="score_overlap", action="store_const", const=False,
                   help="exclude reference overlap from scoring")
    g.add_argument("--jobs", type=int)


CONFIG_KEYS = (
    "preset", "mode", "k", "sigma", "stop", "score_weight", "beta", "n_b", "pca", "ahc_threshold",
    "eigen_threshold", "n0_method", "learning_rate", "epochs", "outer_iterations", "balance_pairs",
    "length_norm", "seed", "collar", "score_overlap", "jobs",
)


def config_from_args(args) -> PipelineConfig:
    overrides = {k: getattr(args, k, None) for k in CONFIG_KEYS}
    return load_config(args.config, **overrides)


# -- recording processing ------------------------------------------------------


def _process(job) -> tuple[RecordingResult, DerReport | None]:
    path, ref_path, wt, plda, cfg = job
    try:
        rec = read_embeddings(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"{Path(path).stem}: read: {exc}") from None
    ref = read_rttm(ref_path, rec.recording_id) if ref_path else None
    n_spk = len(ref.speakers) if ref is not None else None
    try:
        result = run_recording(rec, wt, plda, cfg, n_speakers=n_spk)
    except Exception as exc:  # noqa: BLE001 - reported with recording and stage
        stage = "selfsup" if cfg.selfsup else "cluster"
        raise CliError(f"{rec.recording_id}: {stage}: {exc}") from exc
    report = compute_der(ref, result.hypothesis, cfg.collar, cfg.score_overlap) if ref is not None else None
    return result, report


def process_recordings(files, ref_dir, wt, plda, cfg: PipelineConfig):
    jobs = []
    for f in files:
        ref_path = None
        if ref_dir:
            ref_path = Path(ref_dir) / f"{f.stem}.rttm"
            if not ref_path.is_file():
                raise CliError(f"{f.stem}: no reference RTTM at {ref_path}")
        jobs.append((f, ref_path, wt, plda, cfg))
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            return list(pool.map(_process, jobs))
    return [_process(j) for j in jobs]


def write_results(results, out_dir: Path, cfg: PipelineConfig) -> None:
    """Write every output only after all recordings succeeded."""
    reports = [r for _, r in results if r is not None]
    for res, _ in results:
        atomic_write_text(out_dir / "rttm" / f"{res.recording_id}.rttm", format_rttm(res.hypothesis))
        if res.diagnostics:
            body = "".join(f"{line}\n" for line in _diag_lines(res))
            atomic_write_text(out_dir / "diagnostics" / f"{res.recording_id}.txt", body)
        if res.net is not None:
            save_metricnet(res.net, out_dir / "models" / f"{res.recording_id}.metricnet")
    if reports:
        atomic_write_text(out_dir / "report.txt", format_report(reports))
    atomic_write_text(out_dir / "config.txt", cfg.as_lines())


def _diag_lines(res: RecordingResult):
    for rec in res.diagnostics:
        for epoch, loss in enumerate(rec.losses):
            yield f"{rec.iteration} {epoch} {loss:.9g} {rec.n_clusters}"


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_recordings=args.n_recordings, n_speakers=args.n_speakers, n_segments=args.n_segments,
        dim=args.dim, psi=args.psi, window=args.window, shift=args.shift, p_stay=args.p_stay,
        seed=args.seed,
    )
    corpus = make_corpus(cfg)
    out = Path(args.out)
    dev_spans = uniform_segments((len(corpus.dev) - 1) * cfg.shift + cfg.window, cfg.window, cfg.shift)
    dev = RecordingEmbeddings("dev", dev_spans[: len(corpus.dev)], corpus.dev)
    atomic_write_text(out / "dev.emb", format_embeddings(dev))
    atomic_write_text(out / "train.txt", format_labelled_vectors(corpus.train, [f"s{l}" for l in corpus.train_labels]))
    for r in corpus.recordings:
        atomic_write_text(out / "emb" / f"{r.embeddings.recording_id}.emb", format_embeddings(r.embeddings))
        atomic_write_text(out / "ref" / f"{r.embeddings.recording_id}.rttm", format_rttm(r.reference))
    logger.info("wrote %d synthetic recordings to %s", cfg.n_recordings, out)
    return 0


def cmd_preprocess(args) -> int:
    wt = fit_whitening(load_dev_matrix(args.dev))
    save_whitening(wt, args.whiten_out)
    if args.emb or args.emb_dir:
        cfg = config_from_args(args)
        out_dir = Path(args.out_dir or ".")
        for f in embedding_files(args.emb, args.emb_dir):
            reduced, pca = preprocess_recording(read_embeddings(f), wt, cfg.pca_mode)
            atomic_write_text(out_dir / f"{f.stem}.emb", format_embeddings(reduced))
            save_pca(pca, out_dir / f"{f.stem}.pca")
    return 0


def cmd_plda_train(args) -> int:
    x, labels = read_labelled_vectors(args.train)
    if args.whiten:
        x = length_normalize(load_whitening(args.whiten).apply(x))
    save_plda(fit_plda(x, labels), args.out)
    return 0


def _load_models(args):
    if args.whiten and args.plda:
        return load_whitening(args.whiten), load_plda(args.plda)
    if args.dev and args.train:
        wt = fit_whitening(load_dev_matrix(args.dev))
        x, labels = read_labelled_vectors(args.train)
        return wt, fit_plda(length_normalize(wt.apply(x)), labels)
    raise CliError("give --whiten and --plda, or --dev and --train to fit them")


def _run(args, force_mode: str | None = None) -> int:
    cfg = config_from_args(args)
    if force_mode is not None and not cfg.mode.startswith(force_mode):
        cfg = PipelineConfig(**{**vars(cfg), "mode": f"{force_mode}-{cfg.method}"})
    files = embedding_files(args.emb, args.emb_dir)
    wt, plda = _load_models(args)
    results = process_recordings(files, args.ref_dir, wt, plda, cfg)
    write_results(results, Path(args.out_dir), cfg)
    return 0


def cmd_score(args) -> int:
    ref_files = {p.stem: p for p in sorted(Path(args.ref).glob("*.rttm"))}
    hyp_files = {p.stem: p for p in sorted(Path(args.hyp).glob("*.rttm"))}
    missing = sorted(set(ref_files) ^ set(hyp_files))
    for rid in missing:
        side = "hypothesis" if rid in ref_files else "reference"
        logger.error("recording %s has no %s", rid, side)
    reports = [
        compute_der(read_rttm(ref_files[rid], rid), read_rttm(hyp_files[rid], rid), args.collar, not args.no_overlap)
        for rid in sorted(set(ref_files) & set(hyp_files))
    ]
    text = format_report(reports)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if missing and not args.allow_missing:
        print(f"unmatched recordings: {' '.join(missing)}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diarclust", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic recordings and references")
    p.add_argument("--out", required=True)
    p.add_argument("--n-recordings", type=int, default=10)
    p.add_argument("--n-speakers", type=int, default=4)
    p.add_argument("--n-segments", type=int, default=200)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--psi", type=float, default=3.0, help="between/within speaker variance ratio")
    p.add_argument("--window", type=float, default=1.5)
    p.add_argument("--shift", type=float, default=0.75)
    p.add_argument("--p-stay", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="fit whitening; optionally reduce recordings")
    p.add_argument("--dev", nargs="+", required=True, help="development embedding files")
    p.add_argument("--whiten-out", required=True)
    p.add_argument("--emb", nargs="*")
    p.add_argument("--emb-dir")
    p.add_argument("--out-dir")
    add_config_args(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("plda-train", help="train PLDA on labelled vectors")
    p.add_argument("--train", required=True, help="'<speaker> <v1> ... <vD>' lines")
    p.add_argument("--whiten", help="whitening file; vectors are whitened and length-normalized first")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plda_train)

    for name, mode, func in (
        ("cluster", "baseline-pic", lambda a: _run(a, "baseline")),
        ("selfsup", "selfsup-pic", lambda a: _run(a, "selfsup")),
        ("pipeline", None, _run),
    ):
        p = sub.add_parser(name, help=f"{name} recordings into RTTM hypotheses")
        p.add_argument("--emb", nargs="*")
        p.add_argument("--emb-dir")
        p.add_argument("--ref-dir", help="reference RTTMs (<id>.rttm) for DER and oracle counts")
        p.add_argument("--out-dir", required=True)
        p.add_argument("--whiten")
        p.add_argument("--plda")
        p.add_argument("--dev", nargs="*", help="fit whitening from these embedding files")
        p.add_argument("--train", help="fit PLDA from this labelled vector file")
        add_config_args(p, mode)
        p.set_defaults(func=func)

    p = sub.add_parser("score", help="DER of hypothesis RTTMs against references")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--collar", type=float, default=0.0)
    p.add_argument("--no-overlap", action="store_true", help="exclude reference overlap regions")
    p.add_argument("--allow-missing", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except (CliError, FormatError, ValueError, OSError) as exc:
        logger.error("%s", exc)
        print(f"diarclust: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
