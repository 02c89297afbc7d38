"""Deterministic demo fixtures for offline runs and tests.

Builds a 270-instance gold-labeled corpus (172 valid, 98 noisy) whose
comments carry cue markers that a mock rule table maps to classifier
responses, reproducing the reference confusion counts
(tp=63, fp=11, fn=109, tn=87) without any network access. Also emits
perturbed "generations" files so the BLEU and clustering commands have
something honest to chew on.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Tuple

from .corpus import Dataset, ReviewInstance, write_dataset

CUE_VALID = "[cue:v]"
CUE_NOISY = "[cue:n]"

GOLD_VALID = 172
GOLD_NOISY = 98
PREDICTED_VALID_OF_VALID = 63  # tp
PREDICTED_VALID_OF_NOISY = 11  # fp

LANGS = ("py", "java", "go", "js", "c", "cpp", "cs", "php", "rb")

_VALID_COMMENTS = (
    "Please rename `{ident}` to something more descriptive.",
    "This loop can be simplified with a list comprehension.",
    "Add a unit test covering the empty-input case here.",
    "Move this constant to module level and document it.",
    "Handle the error instead of swallowing the exception.",
    "Use the logger instead of printing to stdout.",
)

_NOISY_COMMENTS = (
    "Why do we need this change?",
    "Hmm, not sure about this one.",
    "What happens if `{ident}` is null?",
    "Is this related to the other pull request?",
    "Interesting approach.",
    "Ok, makes sense I guess.",
)

_IDENTS = ("retry_count", "parse_opts", "maxBuf", "handle_req", "cfg_path")

_PATCH_TEMPLATE = """@@ -{start},3 +{start},4 @@ def update_{ident}():
 value = load_{ident}()
-result = process(value)
+result = process(value, strict=True)
+audit(result)
 return result"""


def demo_corpus() -> Dataset:
    """The 270-instance gold-labeled corpus with embedded mock cues."""
    instances = []
    for i in range(GOLD_VALID + GOLD_NOISY):
        is_valid = i < GOLD_VALID
        if is_valid:
            template = _VALID_COMMENTS[i % len(_VALID_COMMENTS)]
            cue = CUE_VALID if i < PREDICTED_VALID_OF_VALID else CUE_NOISY
        else:
            j = i - GOLD_VALID
            template = _NOISY_COMMENTS[j % len(_NOISY_COMMENTS)]
            cue = CUE_VALID if j < PREDICTED_VALID_OF_NOISY else CUE_NOISY
        ident = _IDENTS[i % len(_IDENTS)]
        comment = template.format(ident=ident) + f" (case {i:03d}) {cue}"
        instances.append(
            ReviewInstance(
                id=f"demo-{i:04d}",
                patch=_PATCH_TEMPLATE.format(start=10 + i % 40, ident=ident),
                comment=comment,
                lang=LANGS[i % len(LANGS)],
                split="train",
                gold_label="valid" if is_valid else "noisy",
            )
        )
    return Dataset(instances)


def mock_rules() -> dict:
    """Rule table for the mock backend keyed on the comment cues."""
    return {
        "rules": [
            [CUE_VALID, "Label: valid\nReason: requests a concrete, applicable change."],
            [CUE_NOISY, "Label: noisy\nReason: no applicable action is requested."],
        ],
        "default": "Label: noisy\nReason: no cue recognized.",
        "embed_dim": 64,
    }


def demo_generations(dataset: Dataset) -> Tuple[dict, dict]:
    """(baseline, improved) generations keyed by id.

    Both are token-dropped copies of the reference comment; the improved
    run drops fewer tokens, so its BLEU-4 sits reliably above baseline.
    """
    baseline = {}
    improved = {}
    for inst in dataset:
        words = inst.comment.split()
        baseline[inst.id] = " ".join(w for i, w in enumerate(words) if i % 3 != 1)
        improved[inst.id] = " ".join(w for i, w in enumerate(words) if i % 6 != 4)
    return baseline, improved


def write_demo_tree(out_dir) -> dict:
    """Materialize the demo fixture files; returns the path map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = demo_corpus()
    paths = {
        "corpus": out / "corpus.jsonl",
        "mock_rules": out / "mock_rules.json",
        "config": out / "config.yaml",
        "generations_baseline": out / "generations_baseline.jsonl",
        "generations_improved": out / "generations_improved.jsonl",
        "subset_labels": out / "subset_labels.jsonl",
    }
    write_dataset(dataset, paths["corpus"])
    paths["mock_rules"].write_text(
        json.dumps(mock_rules(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    paths["config"].write_text(
        "\n".join(
            [
                "fields:",
                "  id: id",
                "  patch: patch",
                "  comment: msg",
                "prompt:",
                "  variant: definition",
                "  input_mode: comment_only",
                "model:",
                f"  endpoint: mock://{paths['mock_rules']}",
                "  model_id: mock-classifier",
                "  temperature: 0.1",
                "seed: 42",
                "",
            ]
        ),
        encoding="utf-8",
    )
    baseline, improved = demo_generations(dataset)
    for key, gens in (("generations_baseline", baseline), ("generations_improved", improved)):
        with open(paths[key], "w", encoding="utf-8") as fh:
            for gid, text in gens.items():
                fh.write(json.dumps({"id": gid, "text": text}, ensure_ascii=False) + "\n")
    with open(paths["subset_labels"], "w", encoding="utf-8") as fh:
        for i, inst in enumerate(dataset):
            fh.write(
                json.dumps(
                    {
                        "id": inst.id,
                        "label": inst.gold_label,
                        "source": "our" if i % 2 == 0 else "tufano",
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    return paths


def main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(description="write the reviewclean demo fixtures")
    parser.add_argument("out_dir", help="directory for the fixture files")
    args = parser.parse_args(argv)
    paths = write_demo_tree(args.out_dir)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
