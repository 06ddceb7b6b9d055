"""Command-line entry point: ``qlossbench sample|decode|train|bench``.

Exit codes: 0 success, 2 usage or configuration error, 3 file I/O or
format error, 4 numerical abort (divergence, non-finite values).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from qlossbench.config import DECODERS, ConfigError, RunConfig, load_config_file, resolve
from qlossbench.errors import FormatError, NumericalAbort
from qlossbench.experiment import Dataset, load_dataset, sample_dataset, save_dataset
from qlossbench.flicker import calibrate_background, flicker_scores, prior_log_odds
from qlossbench.lattice import build_layout
from qlossbench.matching import build_detector_graph, decode_dataset, mwpm_decode, erasure_reweight
from qlossbench.metrics import EvalReport, final_verdict, latency_bench, logical_accuracy
from qlossbench.stgnn.checkpoint import load_model, save_model
from qlossbench.stgnn.model import STGNN, encode, encode_dataset
from qlossbench.stgnn.train import predict, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("qlossbench")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse's own usage errors exit with 2 already
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON file of flat RunConfig keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output path")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_experiment(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--basis")
    p.add_argument("--p-pauli", dest="p_pauli", type=float)
    p.add_argument("--p-meas", dest="p_meas", type=float)
    p.add_argument("--p-loss", dest="p_loss", type=float)
    p.add_argument("--p", dest="p_all", type=float, help="set all three noise rates")


def _add_decoder(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset")
    p.add_argument("--decoder", choices=DECODERS)
    p.add_argument("--checkpoint")
    p.add_argument("--threshold", type=float)
    p.add_argument("--erasure-eps", dest="erasure_eps", type=float)
    p.add_argument("--erasure-onset", dest="erasure_onset", choices=("marginal", "flat"))
    p.add_argument("--verdict-max", dest="verdict_max", action="store_const", const=True)
    p.add_argument("--background-shots", dest="background_shots", type=int)


def _add_model(p: argparse.ArgumentParser) -> None:
    for name in ("D", "n_heads", "N_l", "kernel", "distance_cap", "epochs", "batch_size"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int)
    for name in ("lambda_logic", "lambda_loss", "dropout", "lr", "target_accuracy"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float)
    p.add_argument("--lr-schedule", dest="lr_schedule", choices=("constant", "cosine"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qlossbench", description="Loss-aware surface-code memory workbench")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sample", help="simulate a memory experiment and write a dataset file")
    _add_common(p)
    _add_experiment(p)
    p.add_argument("--shots", type=int)

    p = sub.add_parser("decode", help="run a decoder over a dataset and write a report")
    _add_common(p)
    _add_decoder(p)

    p = sub.add_parser("train", help="train the graph network on a dataset")
    _add_common(p)
    _add_model(p)
    p.add_argument("--dataset")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("bench", help="measure per-window decoding latency")
    _add_common(p)
    _add_decoder(p)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--warmup", type=int)
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    values = load_config_file(args.config) if args.config else {}
    overrides = {k: v for k, v in vars(args).items() if k in RunConfig.keys()}
    p_all = getattr(args, "p_all", None)
    if p_all is not None:
        for k in ("p_pauli", "p_meas", "p_loss"):
            overrides.setdefault(k, None)
            if overrides[k] is None:
                overrides[k] = p_all
    cfg = resolve(values, overrides)
    cfg.validate(args.command)
    return cfg


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _load_inputs(cfg: RunConfig) -> Dataset:
    return load_dataset(cfg.dataset)


def cmd_sample(cfg: RunConfig) -> int:
    layout = build_layout(cfg.d)
    ds = sample_dataset(layout, cfg.noise(), cfg.T, cfg.basis, cfg.shots, cfg.seed)
    save_dataset(ds, cfg.out)
    log.info("wrote %d shots to %s (hash %s)", len(ds), cfg.out, ds.content_hash())
    return EXIT_OK


def _report(cfg: RunConfig, ds: Dataset) -> EvalReport:
    return EvalReport(decoder=cfg.decoder, config=cfg.to_dict(), dataset_hash=ds.content_hash())


def _matching_predictions(cfg: RunConfig, ds: Dataset) -> np.ndarray:
    graph = build_detector_graph(ds.layout, ds.noise, ds.T, ds.basis)
    return decode_dataset(
        graph, ds, erasure=cfg.decoder == "de-mwpm", eps=cfg.erasure_eps, onset=cfg.erasure_onset
    )


def _flicker_probs(cfg: RunConfig, ds: Dataset) -> np.ndarray:
    bg = calibrate_background(ds.layout, ds.noise, ds.T, ds.basis, cfg.background_shots, cfg.seed)
    scores = flicker_scores(ds.detectors, ds.layout, bg, ds.basis)
    return scores.probabilities(prior_log_odds(ds.noise.p_loss, ds.T))


def cmd_decode(cfg: RunConfig) -> int:
    ds = _load_inputs(cfg)
    report = _report(cfg, ds)
    if cfg.decoder in ("mwpm", "de-mwpm"):
        preds = _matching_predictions(cfg, ds)
        probs = None
    elif cfg.decoder == "flicker":
        preds = None
        probs = _flicker_probs(cfg, ds)
    else:
        model, _ = load_model(cfg.checkpoint)
        if model.layout.d != ds.d:
            raise ConfigError(f"checkpoint is for d={model.layout.d}, dataset has d={ds.d}")
        preds, probs = predict(model, encode_dataset(ds))
    if preds is not None and len(ds):
        acc = logical_accuracy(preds, ds)
        report.logical_accuracy = acc.accuracy if acc.scored else None
        report.logical_scored = acc.scored
        report.per_T = {str(ds.T): report.logical_accuracy}
    if probs is not None and len(ds):
        report.add_loss(final_verdict(probs, cfg.verdict_max), ds, cfg.threshold)
    _write(cfg.out, report.to_json())
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    ds = _load_inputs(cfg)
    start = 0
    if cfg.resume:
        model, header = load_model(cfg.resume)
        start = int(header.get("epoch", 0))
        if model.layout.d != ds.d:
            raise ConfigError(f"checkpoint is for d={model.layout.d}, dataset has d={ds.d}")
    else:
        model = STGNN(ds.layout, cfg.model_config())
    log_path = Path(str(cfg.out) + ".log")
    stop = None
    if cfg.target_accuracy is not None:
        stop = lambda s: s.logical_accuracy >= cfg.target_accuracy  # noqa: E731
    with log_path.open("a") as fh:
        def on_epoch(stats):
            fh.write(stats.line() + "\n")
            fh.flush()
        result = train(model, ds, cfg.optimizer(), on_epoch=on_epoch, start_epoch=start, stop=stop)
    save_model(
        cfg.out, model, epoch=result.epochs_done,
        extra={"dataset_hash": ds.content_hash(), "config": cfg.to_dict()},
    )
    last = result.history[-1] if result.history else None
    summary = {"epochs_done": result.epochs_done, "final": asdict(last) if last else None}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_bench(cfg: RunConfig) -> int:
    ds = _load_inputs(cfg)
    if len(ds) == 0:
        raise ConfigError("dataset has no shots to benchmark")
    report = _report(cfg, ds)
    records = [ds[i] for i in range(len(ds))]
    if cfg.decoder == "stgnn":
        model, _ = load_model(cfg.checkpoint)
        model.eval()

        @torch.no_grad()
        def one(rec):
            return model(encode(model.layout, rec.ancilla_outcomes, rec.detectors, rec.basis.code))

        @torch.no_grad()
        def rounds(rec):
            # re-decode the growing window as each round arrives
            T = rec.ancilla_outcomes.shape[0]
            for t in range(1, T + 2):
                n = max(t, model.cfg.kernel)
                anc = np.zeros_like(rec.ancilla_outcomes[:1]).repeat(n - 1, 0)
                det = np.zeros_like(rec.detectors[:1]).repeat(n, 0)
                k = min(t, T + 1)
                det[:k] = rec.detectors[:k]
                anc[: min(k, n - 1)] = rec.ancilla_outcomes[: min(k, n - 1)]
                model(encode(model.layout, anc, det, rec.basis.code))

        stats = latency_bench(
            one, records, cfg.repetitions, cfg.warmup,
            pass_counter=lambda: model.forward_calls, sequential=rounds,
        )
    else:
        graph = build_detector_graph(ds.layout, ds.noise, ds.T, ds.basis)
        if cfg.decoder == "flicker":
            bg = calibrate_background(ds.layout, ds.noise, ds.T, ds.basis, cfg.background_shots, cfg.seed)

            def one(rec):
                return flicker_scores(rec.detectors, ds.layout, bg, ds.basis)
        elif cfg.decoder == "de-mwpm":
            def one(rec):
                lost = np.flatnonzero(rec.loss_mask_truth[-1])
                g = erasure_reweight(graph, lost, cfg.erasure_eps, cfg.erasure_onset)
                return mwpm_decode(g, rec.detectors)
        else:
            def one(rec):
                return mwpm_decode(graph, rec.detectors)
        stats = latency_bench(one, records, cfg.repetitions, cfg.warmup)
    report.latency = asdict(stats)
    _write(cfg.out, report.to_json())
    return EXIT_OK


COMMANDS = {"sample": cmd_sample, "decode": cmd_decode, "train": cmd_train, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"qlossbench: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"qlossbench: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalAbort as exc:
        print(f"qlossbench: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
