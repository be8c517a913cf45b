"""Command-line entry point.

Commands: align, tokenize, detokenize, build-dataset, train, generate,
evaluate, stats, synth-fixtures. A JSON config file supplies defaults;
explicit flags win. All randomness flows through --seed. Failures print a
machine-readable JSON error to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import TimeMap, dtw_path, remap_notes, time_map_from_path
from .beat_align import build_weak_pair
from .core import (
    BeatGrid,
    PianoCoverError,
    PianoPerformance,
    TempoEvent,
    bars_from_grid,
    build_beat_grid_from_tempo,
    load_beats,
)
from .dataset import PianoOnlyRecord, filter_pair, load_dataset, save_dataset, segment
from .encoder import ConditionBlock, EncoderConfig, extract_condition_features
from .features import FeatureMatrix, chroma_from_midi, chromagram, load_features, read_wav
from .fixtures import constant_grid, write_fixture_corpus
from .metrics import MelodyContour, grooving_similarity_next, mca, pitch_class_entropy_4, skyline
from .midi_io import read_midi, write_midi
from .model import (
    ModelCheckpoint,
    ModelConfig,
    SamplingConfig,
    TrainConfig,
    generate as generate_tokens,
    train as run_training,
)
from .remi_codec import TokenSequence, build_vocabulary, decode, encode, read_token_jsonl
from .stats import (
    corpus_report,
    duration_deviation,
    estimate_bpm,
    ioi_deviation,
    tempo_deviation,
    write_report_csv,
    write_report_json,
)


class CliError(PianoCoverError):
    """Bad command-line usage."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        _emit_error(CliError(message))
        raise SystemExit(2)


class _Context:
    """Resolved config file + provenance stamped into artifacts."""

    def __init__(self, config_path: str | None, log_json: bool):
        self.config: dict = {}
        self.log_json = log_json
        raw = b"{}"
        if config_path:
            raw = Path(config_path).read_bytes()
            try:
                self.config = json.loads(raw)
            except ValueError as exc:
                raise CliError(f"malformed config file {config_path}: {exc}") from exc
            if not isinstance(self.config, dict):
                raise CliError(f"config file {config_path} must hold a JSON object")
        self.config_hash = hashlib.sha256(raw).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"version": __version__, "config_hash": self.config_hash}

    def opt(self, flag_value, key: str, default):
        if flag_value is not None:
            return flag_value
        return self.config.get(key, default)

    def log(self, message: str, **fields) -> None:
        if self.log_json:
            print(json.dumps({"msg": message, **fields}), file=sys.stderr)
        else:
            print(message, file=sys.stderr)


def _emit_error(exc: Exception) -> None:
    payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    print(json.dumps(payload), file=sys.stderr)


def _load_side_features(path: str, frame_rate: float | None = None) -> FeatureMatrix:
    """Features from .wav (chromagram), .fmx (stored), or .mid (synthetic)."""
    suffix = Path(path).suffix.lower()
    if suffix == ".wav":
        pcm, sr = read_wav(path)
        return chromagram(pcm, sr)
    if suffix == ".fmx":
        return load_features(path)
    if suffix in (".mid", ".midi"):
        return chroma_from_midi(read_midi(path), frame_rate or 10.0)
    raise CliError(f"cannot derive features from {path!r}; expected .wav, .fmx, or .mid")


def _grid_for(perf: PianoPerformance, beats_path: str | None) -> BeatGrid:
    """Annotation file when given, else the tempo-map fallback with one
    trailing bar of headroom so the final bar closes."""
    if beats_path:
        return load_beats(beats_path)
    tempi = perf.tempo_events or (TempoEvent(0.0, 120.0),)
    bar_seconds = 4 * 60.0 / tempi[-1].bpm
    return build_beat_grid_from_tempo(tempi, perf.end_time + bar_seconds, 4)


def cmd_align(args, ctx: _Context) -> int:
    song = _load_side_features(args.song)
    piano_path = Path(args.piano)
    if piano_path.suffix.lower() in (".mid", ".midi"):
        piano = chroma_from_midi(read_midi(piano_path), song.frame_rate)
    else:
        piano = _load_side_features(args.piano)
    path = dtw_path(piano, song)
    time_map = time_map_from_path(path, song.frame_rate)
    time_map.save(args.output, extra={"path_cost": path.cost, **ctx.provenance()})
    ctx.log(f"aligned {args.piano} -> {args.song}", cost=path.cost, knots=len(time_map.knots))
    return 0


def cmd_tokenize(args, ctx: _Context) -> int:
    perf = read_midi(args.midi)
    grid = _grid_for(perf, args.beats)
    vocab = build_vocabulary()
    seq = encode(perf, grid, vocab)
    piece_id = args.id or Path(args.midi).stem
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_meta": ctx.provenance()}) + "\n")
        fh.write(
            json.dumps(
                {
                    "id": piece_id,
                    "tokens": list(seq.ids),
                    "bar_spans": [list(s) for s in seq.bar_spans],
                }
            )
            + "\n"
        )
    ctx.log(f"tokenized {args.midi}", tokens=len(seq.ids), bars=seq.n_bars)
    return 0


def cmd_detokenize(args, ctx: _Context) -> int:
    records = read_token_jsonl(args.tokens)
    if not records:
        raise CliError(f"no token records in {args.tokens}")
    if args.id:
        matches = [r for r in records if r[0] == args.id]
        if not matches:
            raise CliError(f"piece {args.id!r} not found in {args.tokens}")
        piece_id, seq = matches[0]
    else:
        piece_id, seq = records[0]
    if args.beats:
        grid = load_beats(args.beats)
    else:
        grid = constant_grid(max(1, seq.n_bars), args.bpm)
    vocab = build_vocabulary()
    perf = decode(seq, grid, vocab)
    write_midi(perf, args.output)
    ctx.log(f"detokenized {piece_id}", notes=len(perf.notes))
    return 0


def _build_pair_record(row: dict, root: Path, vocab, ctx: _Context):
    piano = read_midi(root / row["piano_midi"])
    piano_grid = load_beats(root / row["piano_beats"])
    tokens = encode(piano, piano_grid, vocab)
    song_features = _load_side_features(str(root / row["song_features"]))
    song_grid = load_beats(root / row["song_beats"])
    if row.get("warp"):
        time_map = TimeMap.load(root / row["warp"])
    else:
        piano_chroma = chroma_from_midi(piano, song_features.frame_rate)
        time_map = time_map_from_path(dtw_path(piano_chroma, song_features), song_features.frame_rate)
    pair = build_weak_pair(
        row["id"], piano, tokens, song_features, time_map,
        piano_grid, song_grid, bars_from_grid(piano_grid),
    )
    if row.get("ref_contour"):
        reference = MelodyContour.load(root / row["ref_contour"])
        mca_value = mca(reference, skyline(piano))
    else:
        mca_value = 1.0  # no reference melody: the MCA criterion cannot reject
    length_dev = duration_deviation(piano.length, song_features.duration) - 1.0
    return pair, mca_value, length_dev


def cmd_build_dataset(args, ctx: _Context) -> int:
    manifest_path = Path(args.manifest)
    root = manifest_path.parent
    min_mca = ctx.opt(args.min_mca, "min_mca", 0.05)
    max_dev = ctx.opt(args.max_length_dev, "max_length_dev", 0.15)
    segment_len = ctx.opt(args.segment_len, "segment_len", 1024)
    vocab = build_vocabulary()
    rows = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                if "_meta" not in row:
                    rows.append(row)
    rows.sort(key=lambda r: r["id"])

    kept, rejected = [], []

    def process(row: dict):
        if row.get("kind", "pair") == "piano":
            piano = read_midi(root / row["piano_midi"])
            grid = load_beats(root / row["piano_beats"])
            return row, PianoOnlyRecord(
                piece_id=row["id"],
                perf=piano,
                tokens=encode(piano, grid, vocab),
                features=chroma_from_midi(piano),
                grid=grid,
                bars=tuple(bars_from_grid(grid)),
            ), None
        pair, mca_value, length_dev = _build_pair_record(row, root, vocab, ctx)
        decision = filter_pair(mca_value, length_dev, min_mca, max_dev)
        return row, pair, decision

    jobs = max(1, args.jobs)
    if jobs == 1:
        results = [process(row) for row in rows]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(process, rows))

    from .dataset import build_interleaved  # local import keeps torch out of light commands

    for row, record, decision in results:
        if decision is not None and not decision.keep:
            rejected.append({"id": row["id"], "reason": decision.reason})
            ctx.log(f"rejected {row['id']}: {decision.reason}")
            continue
        try:
            seq = build_interleaved(record)
            segment(seq, vocab, segment_len)
        except PianoCoverError as exc:
            rejected.append({"id": row["id"], "reason": str(exc)})
            ctx.log(f"rejected {row['id']}: {exc}")
            continue
        kept.append(record)

    out_dir = Path(args.output)
    save_dataset(kept, out_dir)
    summary = {
        "kept": [getattr(r, "pair_id", None) or getattr(r, "piece_id") for r in kept],
        "rejected": rejected,
        "min_mca": min_mca,
        "max_length_dev": max_dev,
        "segment_len": segment_len,
        **ctx.provenance(),
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1)
    ctx.log(f"dataset built: {len(kept)} kept, {len(rejected)} rejected", out=str(out_dir))
    return 0


def _model_config_from(args, ctx: _Context, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        d_model=ctx.opt(args.d_model, "d_model", 512),
        n_layers=ctx.opt(args.layers, "layers", 8),
        n_heads=ctx.opt(args.heads, "heads", 8),
        ffn_dim=ctx.opt(args.ffn_dim, "ffn_dim", 0),
        dropout=ctx.opt(args.dropout, "dropout", 0.1),
        max_positions=ctx.opt(args.max_positions, "max_positions", 1024),
    )


def _encoder_config_from(args, ctx: _Context) -> EncoderConfig:
    return EncoderConfig(
        input_dim=ctx.opt(getattr(args, "cond_dim", None), "cond_dim", 14),
        d_model=ctx.opt(args.d_model, "d_model", 512),
        n_layers=ctx.opt(getattr(args, "adapter_layers", None), "adapter_layers", 4),
        n_heads=ctx.opt(getattr(args, "adapter_heads", None), "adapter_heads", 8),
    )


def cmd_train(args, ctx: _Context) -> int:
    vocab = build_vocabulary()
    corpus = load_dataset(args.dataset)
    if args.stage == "pretrain":
        corpus = [seq for seq in corpus if seq.kind == "piano_only"]
    if not corpus:
        raise CliError(f"no usable sequences for stage {args.stage} in {args.dataset}")
    init = ModelCheckpoint.load(args.init) if args.init else None
    if init is not None:
        model_config, encoder_config = init.model_config, init.encoder_config
    else:
        model_config = _model_config_from(args, ctx, vocab.size)
        encoder_config = _encoder_config_from(args, ctx)
    train_config = TrainConfig(
        learning_rate=ctx.opt(args.lr, "lr", 1e-4),
        batch_size=ctx.opt(args.batch_size, "batch_size", 4),
        alpha=ctx.opt(args.alpha, "alpha", 0.25),
        steps=args.steps,
        seed=ctx.opt(args.seed, "seed", 0),
        segment_length=ctx.opt(args.segment_len, "segment_len", 1024),
        checkpoint_every=ctx.opt(args.checkpoint_every, "checkpoint_every", 0),
        allow_scratch_finetune=args.allow_scratch,
    )
    ckpt = run_training(
        args.stage,
        corpus,
        train_config,
        model_config,
        encoder_config,
        vocab,
        init=init,
        checkpoint_dir=Path(args.output).parent,
        log_every=ctx.opt(args.log_every, "log_every", 0),
    )
    ckpt.save(args.output)
    ctx.log(
        f"trained stage={args.stage}",
        steps=train_config.steps,
        final_loss=ckpt.loss_history[-1] if ckpt.loss_history else None,
        checkpoint=str(args.output),
    )
    return 0


def cmd_generate(args, ctx: _Context) -> int:
    ckpt = ModelCheckpoint.load(args.checkpoint)
    vocab = build_vocabulary()
    song_features = _load_side_features(args.features)
    song_grid = load_beats(args.beats)
    bars = bars_from_grid(song_grid)
    if args.max_bars:
        bars = bars[: args.max_bars]
    blocks = [
        ConditionBlock(bar.index, extract_condition_features(song_features, song_grid, bar))
        for bar in bars
    ]
    sampling = SamplingConfig(
        temperature=ctx.opt(args.temperature, "temperature", 1.0),
        top_p=ctx.opt(args.top_p, "top_p", 1.0),
        max_tokens_per_bar=ctx.opt(args.max_tokens_per_bar, "max_tokens_per_bar", 64),
        seed=ctx.opt(args.seed, "seed", 0),
    )
    seq = generate_tokens(ckpt, blocks, vocab, sampling)
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_meta": ctx.provenance()}) + "\n")
        fh.write(
            json.dumps(
                {
                    "id": Path(args.features).stem,
                    "tokens": list(seq.ids),
                    "bar_spans": [list(s) for s in seq.bar_spans],
                }
            )
            + "\n"
        )
    if args.midi:
        write_midi(decode(seq, song_grid, vocab), args.midi)
    ctx.log("generated", bars=seq.n_bars, tokens=len(seq.ids))
    return 0


def cmd_evaluate(args, ctx: _Context) -> int:
    vocab = build_vocabulary()
    records = read_token_jsonl(args.tokens)
    if not records:
        raise CliError(f"no token records in {args.tokens}")
    grid = load_beats(args.beats)
    reference = MelodyContour.load(args.ref) if args.ref else None
    rows = []
    for piece_id, seq in records:
        perf = decode(seq, grid, vocab)
        row: dict = {"id": piece_id}
        try:
            row["mca"] = mca(reference, skyline(perf)) if reference is not None else ""
        except PianoCoverError as exc:
            row["mca"] = ""
            ctx.log(f"{piece_id}: mca unavailable: {exc}")
        try:
            row["gs"] = grooving_similarity_next(perf, grid)
        except PianoCoverError as exc:
            row["gs"] = ""
            ctx.log(f"{piece_id}: gs unavailable: {exc}")
        try:
            row["h4"] = pitch_class_entropy_4(perf, grid)
        except PianoCoverError as exc:
            row["h4"] = ""
            ctx.log(f"{piece_id}: h4 unavailable: {exc}")
        rows.append(row)

    def fmt(x):
        return f"{x:.6f}" if isinstance(x, float) else x

    with open(args.output, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# version={__version__} config_hash={ctx.config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["id", "mca", "gs", "h4"])
        for row in rows:
            writer.writerow([row["id"], fmt(row["mca"]), fmt(row["gs"]), fmt(row["h4"])])
        for key in ("mca", "gs", "h4"):
            values = [row[key] for row in rows if isinstance(row[key], float)]
            if values:
                writer.writerow(
                    ["corpus_mean" if key == "mca" else "", key, f"{np.mean(values):.6f}", ""]
                )
    ctx.log(f"evaluated {len(rows)} pieces", out=args.output)
    return 0


def cmd_stats(args, ctx: _Context) -> int:
    manifest_path = Path(args.manifest)
    root = manifest_path.parent
    report_rows = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            if "_meta" in row or row.get("kind", "pair") != "pair":
                continue
            piano = read_midi(root / row["piano_midi"])
            piano_grid = load_beats(root / row["piano_beats"])
            song_features = _load_side_features(str(root / row["song_features"]))
            song_grid = load_beats(root / row["song_beats"])
            if row.get("warp"):
                time_map = TimeMap.load(root / row["warp"])
            else:
                piano_chroma = chroma_from_midi(piano, song_features.frame_rate)
                time_map = time_map_from_path(
                    dtw_path(piano_chroma, song_features), song_features.frame_rate
                )
            entry = {
                "id": row["id"],
                "duration_deviation": duration_deviation(piano.length, song_features.duration),
                "tempo_deviation": tempo_deviation(
                    estimate_bpm(piano_grid), estimate_bpm(song_grid)
                ),
                "ioi_deviation": ioi_deviation(
                    piano, remap_notes(piano, time_map, song_grid)
                ),
            }
            report_rows.append(entry)
    report = corpus_report(report_rows)
    report.update(ctx.provenance())
    out = Path(args.output)
    if out.suffix == ".csv":
        write_report_csv(report, out)
    else:
        write_report_json(report, out)
    ctx.log(f"stats over {report['pairs']} pairs", out=str(out))
    return 0


def cmd_synth_fixtures(args, ctx: _Context) -> int:
    vocab = build_vocabulary()
    manifest = write_fixture_corpus(
        args.output,
        vocab,
        n_pairs=args.pairs,
        n_piano_only=args.piano,
        n_bars=args.bars,
        seed=ctx.opt(args.seed, "seed", 0),
    )
    ctx.log(f"fixtures written", manifest=str(manifest))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pianocover", description=__doc__)
    parser.add_argument("--version", action="version", version=f"pianocover {__version__}")
    parser.add_argument("--config", help="JSON config file with flag defaults")
    parser.add_argument("--log-json", action="store_true", help="line-delimited JSON logs on stderr")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers where supported")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("align", help="compute the piano->song time map")
    p.add_argument("piano", help="piano side: .mid, .wav, or .fmx")
    p.add_argument("song", help="song side: .wav, .fmx, or .mid")
    p.add_argument("-o", "--output", required=True, help="time map JSON")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("tokenize", help="MIDI -> token JSONL")
    p.add_argument("midi")
    p.add_argument("--beats", help="beat annotation JSON (default: tempo-map grid)")
    p.add_argument("--id", help="piece id (default: file stem)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("detokenize", help="token JSONL -> MIDI")
    p.add_argument("tokens")
    p.add_argument("--beats", help="beat annotation JSON")
    p.add_argument("--bpm", type=float, default=120.0, help="grid tempo when no beats file")
    p.add_argument("--id", help="piece id to pick (default: first)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_detokenize)

    p = sub.add_parser("build-dataset", help="pair manifest -> training dataset")
    p.add_argument("manifest", help="pairs.jsonl manifest")
    p.add_argument("-o", "--output", required=True, help="dataset directory")
    p.add_argument("--min-mca", type=float, default=None)
    p.add_argument("--max-length-dev", type=float, default=None)
    p.add_argument("--segment-len", type=int, default=None)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="pretrain or fine-tune the model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--stage", choices=["pretrain", "finetune"], required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--init", help="checkpoint stem to start from")
    p.add_argument("-o", "--output", required=True, help="checkpoint stem to write")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--segment-len", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--log-every", type=int, default=None)
    p.add_argument("--allow-scratch", action="store_true", help="fine-tune without a pretrained init")
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--ffn-dim", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--max-positions", type=int, default=None)
    p.add_argument("--cond-dim", type=int, default=None)
    p.add_argument("--adapter-layers", type=int, default=None)
    p.add_argument("--adapter-heads", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate a cover for a song")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="song side: .wav, .fmx, or .mid")
    p.add_argument("--beats", required=True, help="song beat annotation JSON")
    p.add_argument("-o", "--output", required=True, help="token JSONL")
    p.add_argument("--midi", help="also decode to this MIDI path")
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--top-p", type=float, default=None)
    p.add_argument("--max-tokens-per-bar", type=int, default=None)
    p.add_argument("--max-bars", type=int, default=0)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="objective metrics for generated tokens")
    p.add_argument("tokens", help="token JSONL")
    p.add_argument("--beats", required=True)
    p.add_argument("--ref", help="reference melody contour JSON")
    p.add_argument("-o", "--output", required=True, help="CSV report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", help="corpus deviation statistics")
    p.add_argument("manifest", help="pairs.jsonl manifest")
    p.add_argument("-o", "--output", required=True, help=".json or .csv report")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth-fixtures", help="write the synthetic test corpus")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--pairs", type=int, default=4)
    p.add_argument("--piano", type=int, default=4)
    p.add_argument("--bars", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth_fixtures)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        ctx = _Context(args.config, args.log_json)
        return args.func(args, ctx)
    except SystemExit as exc:
        return int(exc.code or 0)
    except PianoCoverError as exc:
        _emit_error(exc)
        return 2
    except OSError as exc:
        _emit_error(exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
