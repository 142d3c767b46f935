"""Command-line surface: one subcommand per pipeline stage, one shared config.

Config files are flat ``key = value`` lines with dotted section prefixes
(``paths.spans = data/spans.jsonl``); relative paths resolve against the
config file's directory.  Exit codes: 0 success, 1 I/O or config failure,
2 data-contract failure (empty corpus, pad collision, dataset too small...),
3 expansion backend failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import corpus, llm_align, tokenizer, two_tower, zeroshot_eval

EXIT_OK = 0
EXIT_IO = 1
EXIT_DATA = 2
EXIT_BACKEND = 3

_DATA_ERRORS = (
    corpus.EmptyCorpus,
    tokenizer.EmptyInput,
    llm_align.PadCollision,
    two_tower.DatasetTooSmall,
    two_tower.DegenerateEmbedding,
    two_tower.ShapeMismatch,
    zeroshot_eval.DimensionMismatch,
    zeroshot_eval.DegenerateLabels,
    zeroshot_eval.EmptyConcept,
)
_BACKEND_ERRORS = (llm_align.BackendUnavailable, llm_align.EmptyResponse)


class ConfigError(Exception):
    pass


@dataclass
class PipelineConfig:
    """Typed view over the flat key = value config file."""

    raw: dict[str, str]
    base_dir: Path

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        raw: dict[str, str] = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, _, value = stripped.partition("=")
                raw[key.strip()] = value.strip()
        return cls(raw=raw, base_dir=path.parent)

    def get(self, key: str, default: str | None = None) -> str | None:
        return self.raw.get(key, default)

    def get_int(self, key: str, default: int) -> int:
        value = self.raw.get(key)
        try:
            return default if value is None else int(value)
        except ValueError as exc:
            raise ConfigError(f"config key {key} is not an integer: {value!r}") from exc

    def get_float(self, key: str, default: float) -> float:
        value = self.raw.get(key)
        try:
            return default if value is None else float(value)
        except ValueError as exc:
            raise ConfigError(f"config key {key} is not a number: {value!r}") from exc

    def path(self, key: str) -> Path | None:
        value = self.raw.get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def input_path(self, key: str) -> Path:
        """A referenced input path; must be configured and must exist."""
        p = self.path(key)
        if p is None:
            raise ConfigError(f"config key {key} is required for this command")
        if not p.exists():
            raise FileNotFoundError(f"{key} file not found: {p}")
        return p

    def output_dir(self) -> Path:
        out = self.path("paths.output_dir")
        if out is None:
            raise ConfigError("config key paths.output_dir is required")
        out.mkdir(parents=True, exist_ok=True)
        return out

    def context_length(self) -> int:
        n = self.get_int("tokenizer.context_length", tokenizer.DEFAULT_CONTEXT_LENGTH)
        if n < 3:
            raise ConfigError(f"tokenizer.context_length must be >= 3, got {n}")
        return n

    def rng_seed(self, override: int | None) -> int:
        return override if override is not None else self.get_int("rng_seed", 0)

    def train_config(self, seed_override: int | None) -> two_tower.TrainConfig:
        return two_tower.TrainConfig(
            batch_size=self.get_int("train.batch_size", 64),
            learning_rate=self.get_float("train.learning_rate", 1e-5),
            adam_beta1=self.get_float("train.adam_beta1", 0.9),
            adam_beta2=self.get_float("train.adam_beta2", 0.999),
            adam_epsilon=self.get_float("train.adam_epsilon", 1e-8),
            eta_min=self.get_float("train.eta_min", 0.0),
            t_0=self.get_int("train.t_0", 0),
            t_mult=self.get_int("train.t_mult", 1),
            epochs=self.get_int("train.epochs", 1),
            rng_seed=self.rng_seed(seed_override),
        )


def load_captions(path) -> list[tuple[str, str]]:
    """JSONL of {image_id, caption}; expanded files ({..., expanded}) also work."""
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            text = rec.get("caption", rec.get("expanded"))
            if text is None:
                raise ValueError(f"{path}: record lacks a caption/expanded field")
            records.append((str(rec.get("image_id", len(records))), str(text)))
    return records


def load_features(path) -> dict[str, np.ndarray]:
    features = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            features[str(rec["image_id"])] = np.array(
                [float(v) for v in rec["features"]], dtype=np.float64
            )
    return features


def _print_table(rows: list[tuple[str, str]], header: tuple[str, str]) -> None:
    width = max(len(header[0]), *(len(r[0]) for r in rows)) if rows else len(header[0])
    print(f"{header[0]:<{width}}  {header[1]}")
    for label, value in rows:
        print(f"{label:<{width}}  {value}")


# --- subcommands -------------------------------------------------------------


def cmd_extract_pairs(config: PipelineConfig, args) -> int:
    spans = corpus.load_spans(config.input_path("paths.spans"))
    exclusions = []
    if config.get("paths.exclusions") is not None:
        exclusions = corpus.load_exclusions(config.input_path("paths.exclusions"))
    pairs = corpus.extract_pairs(spans, exclusions)
    out = Path(args.out) if args.out else config.output_dir() / "pairs.jsonl"
    corpus.write_pairs(pairs, out)
    stats = corpus.corpus_stats(pairs)
    _print_table(
        [(doc, str(count)) for doc, count in stats.rows] + [("total", str(stats.total))],
        ("doc_id", "pairs"),
    )
    print(f"wrote {stats.total} pairs to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_token_stats(config: PipelineConfig, args) -> int:
    vocab = tokenizer.Vocabulary.from_file(config.input_path("paths.vocab"))
    captions = [text for _, text in load_captions(config.input_path("paths.captions"))]
    stats = tokenizer.length_stats(captions, vocab, config.context_length())
    rows = [(name, repr(value)) for name, value in stats.as_rows()]
    _print_table(rows, ("statistic", "value"))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as f:
            f.write("statistic,value\n")
            for name, value in stats.as_rows():
                f.write(f"{name},{value!r}\n")
    return EXIT_OK


def cmd_expand(config: PipelineConfig, args) -> int:
    captions = load_captions(config.input_path("paths.captions"))
    cache_path = config.path("expansion.cache") or config.output_dir() / "expansion_cache.jsonl"
    expander = llm_align.CaptionExpander(
        cache=llm_align.ExpansionCache(cache_path),
        retries=config.get_int("expansion.retries", llm_align.DEFAULT_RETRIES),
        backoff_base=config.get_float("expansion.backoff_base", llm_align.DEFAULT_BACKOFF_BASE),
        concurrency=config.get_int("expansion.concurrency", llm_align.DEFAULT_CONCURRENCY),
        prompt_template=config.get(
            "expansion.prompt_template", llm_align.DEFAULT_PROMPT_TEMPLATE
        ),
    )
    seed = config.rng_seed(args.seed)
    requests = [
        llm_align.ExpansionRequest(
            caption=text,
            max_new_tokens=config.get_int(
                "expansion.max_new_tokens", llm_align.DEFAULT_MAX_NEW_TOKENS
            ),
            backend=config.get("expansion.backend", "mock"),
            seed=seed,
        )
        for _, text in captions
    ]
    results = expander.expand_many(requests)
    out = Path(args.out) if args.out else config.output_dir() / "expanded.jsonl"
    with open(out, "w", encoding="utf-8") as f:
        for (image_id, _), result in zip(captions, results):
            f.write(
                json.dumps(
                    {
                        "image_id": image_id,
                        "original": result.original,
                        "expanded": result.expanded,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    print(
        f"expanded {len(results)} captions "
        f"({expander.network_requests} backend calls) to {out}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_lm_dataset(config: PipelineConfig, args) -> int:
    pairs_path = config.path("paths.pairs") or config.output_dir() / "pairs.jsonl"
    if not pairs_path.exists():
        raise FileNotFoundError(f"pairs file not found: {pairs_path} (run extract-pairs first)")
    pairs = corpus.load_pairs(pairs_path)
    if args.format == "records":
        records = llm_align.make_lm_records(pairs)
        out = Path(args.out) if args.out else config.output_dir() / "lm_records.jsonl"
        llm_align.write_lm_records(records, out)
    else:
        pad = config.get("lm.pad_literal", tokenizer.PAD_TOKEN)
        records = llm_align.make_concat_records(pairs, pad)
        out = Path(args.out) if args.out else config.output_dir() / "lm_concat.txt"
        llm_align.write_concat_records(records, out)
    print(f"wrote {len(records)} {args.format} records to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_train(config: PipelineConfig, args) -> int:
    vocab = tokenizer.Vocabulary.from_file(config.input_path("paths.vocab"))
    captions_key = "train.captions_file" if config.get("train.captions_file") else "paths.captions"
    captions = load_captions(config.input_path(captions_key))
    features = load_features(config.input_path("paths.features"))
    context_length = config.context_length()

    dataset = [
        (features[image_id], tokenizer.tokenize(text, vocab, context_length))
        for image_id, text in captions
        if image_id in features
    ]
    skipped = len(captions) - len(dataset)
    if skipped:
        print(f"skipped {skipped} captions with no feature vector", file=sys.stderr)
    if not dataset:
        raise two_tower.DatasetTooSmall("no (feature, caption) pairs after joining")

    train_cfg = config.train_config(args.seed)
    model = two_tower.TwoTowerModel.initialize(
        d_img=len(dataset[0][0]),
        d_tok=config.get_int("train.d_tok", 32),
        d_emb=config.get_int("train.d_emb", 32),
        vocab_size=len(vocab),
        seed=train_cfg.rng_seed,
    )
    model, log = two_tower.train(model, dataset, train_cfg)

    out = Path(args.out) if args.out else config.output_dir() / "model.ckpt"
    two_tower.save_checkpoint(model, out)
    log_path = config.output_dir() / "loss_log.csv"
    two_tower.write_loss_log(log, log_path)
    print(f"trained {train_cfg.epochs} epochs; checkpoint {out}, loss log {log_path}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(config: PipelineConfig, args) -> int:
    checkpoint = Path(args.checkpoint) if args.checkpoint else config.output_dir() / "model.ckpt"
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    model = two_tower.load_checkpoint(checkpoint)
    vocab = tokenizer.Vocabulary.from_file(config.input_path("paths.vocab"))
    annotations = zeroshot_eval.load_annotations(config.input_path("paths.annotations"))
    report = zeroshot_eval.evaluate(model, annotations, vocab, config.context_length())
    out = Path(args.out) if args.out else config.output_dir() / "eval_report.csv"
    zeroshot_eval.write_report(report, out)
    shown = "n/a" if report.mean_auc is None else f"{report.mean_auc:.4f}"
    print(f"evaluated {len(annotations.concepts)} concepts; mean AUC {shown}; report {out}", file=sys.stderr)
    return EXIT_OK


_COMMANDS = {
    "extract-pairs": cmd_extract_pairs,
    "token-stats": cmd_token_stats,
    "expand": cmd_expand,
    "lm-dataset": cmd_lm_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capalign",
        description="Caption-alignment pipeline: corpus, tokens, expansion, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="pipeline config file")
        p.add_argument("--seed", type=int, default=None, help="override rng_seed")
        p.add_argument("--out", default=None, help="override the output file path")
        if name == "lm-dataset":
            p.add_argument(
                "--format", choices=("records", "concat"), default="records"
            )
        if name == "eval":
            p.add_argument("--checkpoint", default=None, help="model checkpoint path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = PipelineConfig.load(args.config)
        return _COMMANDS[args.command](config, args)
    except _BACKEND_ERRORS as exc:
        print(f"capalign {args.command}: backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except _DATA_ERRORS as exc:
        print(f"capalign {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ConfigError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"capalign {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
