"""End-to-end pipeline walkthrough on a generated synthetic workspace.

Builds a fake two-font "textbook" span file, a caption/feature corpus with
four feature clusters, an exclusion list, and a config, then drives every
CLI stage in order: extract-pairs, token-stats, expand (mock backend),
lm-dataset, train, eval.

Usage: python scripts/run_demo.py [--dir demo_run] [--seed 7]
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from capalign.cli import main as capalign
from capalign.tokenizer import Vocabulary

CLUSTERS = ["plaque", "nodule", "vesicle", "ulcer"]

BODY_SENTENCES = [
    "The plaque is a raised lesion with a flat top.",
    "Scale often covers chronic plaques.",
    "A nodule extends deeper than a papule.",
    "Palpation helps estimate the depth of a nodule.",
    "Vesicles are small fluid filled blisters.",
    "Grouped vesicles suggest a herpetic eruption.",
    "An ulcer is a full thickness loss of the epidermis.",
    "Ulcer edges deserve careful inspection.",
    "Erythema reflects vasodilation in the superficial plexus.",
    "Crust forms when serum dries on an eroded surface.",
    "Excoriation marks follow scratching.",
    "Lichenification shows accentuated skin lines.",
    "Purpura does not blanch with pressure.",
    "Telangiectasia appears as fine dilated vessels.",
    "Atrophy thins the skin and wrinkles its surface.",
    "Induration is best felt rather than seen.",
    "Xerosis roughens the skin in winter.",
    "A bulla is a vesicle larger than one centimeter.",
    "Macules are flat and only visible.",
    "Patches are large flat areas of color change.",
]

VOCAB_WORDS = sorted(
    {
        word.strip(".").lower()
        for sentence in BODY_SENTENCES
        for word in sentence.split()
    }
    | set(CLUSTERS)
    | {"this", "is", "on", "the", "left", "leg", ".", ","}
)


def build_workspace(root: Path, seed: int) -> Path:
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)

    # A fake book: body text in Body/10pt, captions in Caption/8pt, plus a
    # references page the exclusion file removes.
    spans = []
    for i, sentence in enumerate(BODY_SENTENCES):
        spans.append(
            {
                "doc_id": "demo-book",
                "page": 1 + i // 4,
                "span_index": (i % 4) * 2,
                "text": sentence,
                "font_name": "Body",
                "font_size": 10.0,
            }
        )
        spans.append(
            {
                "doc_id": "demo-book",
                "page": 1 + i // 4,
                "span_index": (i % 4) * 2 + 1,
                "text": f"Figure {i}: a clinical photograph.",
                "font_name": "Caption",
                "font_size": 8.0,
            }
        )
    spans.append(
        {
            "doc_id": "demo-book",
            "page": 99,
            "span_index": 0,
            "text": "Reference list entry one. Entry two. Entry three.",
            "font_name": "Body",
            "font_size": 10.0,
        }
    )
    _write_jsonl(root / "spans.jsonl", spans)
    _write_jsonl(root / "exclusions.jsonl", [{"doc_id": "demo-book", "page_ranges": [[99, 99]]}])

    Vocabulary.from_tokens(VOCAB_WORDS).to_file(root / "vocab.txt")

    centroids = 3.0 * np.eye(4)
    captions, features, annotations = [], [], [{"concepts": CLUSTERS}]
    for i in range(120):
        c = i % 4
        vector = centroids[c] + rng.normal(scale=0.3, size=4)
        captions.append(
            {"image_id": f"img{i}", "caption": f"{CLUSTERS[c]} on the left leg."}
        )
        features.append(
            {"image_id": f"img{i}", "features": [float(v) for v in vector]}
        )
        labels = [0, 0, 0, 0]
        labels[c] = 1
        annotations.append(
            {
                "image_id": f"img{i}",
                "features": [float(v) for v in vector],
                "labels": labels,
            }
        )
    _write_jsonl(root / "captions.jsonl", captions)
    _write_jsonl(root / "features.jsonl", features)
    _write_jsonl(root / "annotations.jsonl", annotations)

    config = root / "pipeline.cfg"
    config.write_text(
        "\n".join(
            [
                "# generated demo configuration",
                "paths.spans = spans.jsonl",
                "paths.exclusions = exclusions.jsonl",
                "paths.vocab = vocab.txt",
                "paths.captions = captions.jsonl",
                "paths.features = features.jsonl",
                "paths.annotations = annotations.jsonl",
                "paths.output_dir = out",
                "tokenizer.context_length = 77",
                "expansion.backend = mock",
                "expansion.max_new_tokens = 64",
                "train.captions_file = out/expanded.jsonl",
                "train.batch_size = 32",
                "train.learning_rate = 0.05",
                "train.epochs = 40",
                "train.t_0 = 160",
                "train.d_emb = 8",
                "train.d_tok = 8",
                f"rng_seed = {seed}",
            ]
        )
        + "\n"
    )
    return config


def _write_jsonl(path: Path, records) -> None:
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def run(args: list[str]) -> None:
    print(f"\n$ capalign {' '.join(args)}")
    code = capalign(args)
    if code != 0:
        sys.exit(code)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dir", default="demo_run", type=Path)
    parser.add_argument("--seed", default=7, type=int)
    args = parser.parse_args()

    config = build_workspace(args.dir, args.seed)
    cfg = ["--config", str(config)]
    run(["extract-pairs", *cfg])
    run(["token-stats", *cfg])
    run(["expand", *cfg])
    run(["lm-dataset", *cfg, "--format", "records"])
    run(["lm-dataset", *cfg, "--format", "concat"])
    run(["train", *cfg])
    run(["eval", *cfg])

    report = (args.dir / "out" / "eval_report.csv").read_text().strip().splitlines()
    print("\neval report:")
    for line in report:
        print("  " + line)
    print(f"\nall outputs under {args.dir / 'out'}")


if __name__ == "__main__":
    main()
