"""Writes the small TL;DR-style preference fixture used by the ingestion tests.

Counts for the expected report are computed here, independently of the C++ code.
"""
import json
import random
import sys
from pathlib import Path

out = Path(sys.argv[1])
rng = random.Random(7)
words = "the cat sat on a mat while my roommate argued about rent and dishes again today".split()


def text(n):
    return " ".join(rng.choice(words) for _ in range(n))


def write(path, workers, n_lines, tag):
    rows = []
    for i in range(n_lines):
        w = workers[rng.randrange(len(workers))]
        a, b = text(rng.randint(4, 9)), text(rng.randint(4, 9))
        row = {"prompt_id": f"{tag}_{i:03d}", "worker_id": w, "prompt": "POST: " + text(12)}
        style = i % 3
        if style == 0:
            row["summaries"] = [{"text": a}, {"text": b}]
            row["choice"] = rng.randrange(2)
        elif style == 1:
            row["responses"] = [a, b]
            row["choice"] = rng.randrange(2)
        else:
            row["chosen"] = a
            row["rejected"] = b
        rows.append(row)
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")
    return rows


train_workers = [f"w{i:02d}" for i in range(1, 11)]
test_workers = [f"w{i:02d}" for i in range(7, 15)]
train = write(out / "tldr_train.jsonl", train_workers, 120, "tr")
test = write(out / "tldr_test.jsonl", test_workers, 80, "te")

tw = {r["worker_id"] for r in train}
sw = {r["worker_id"] for r in test}
common = tw & sw
expected = {
    "train_examples": len(train),
    "test_examples": len(test),
    "train_workers": len(tw),
    "test_workers": len(sw),
    "filtered_train_examples": sum(r["worker_id"] in common for r in train),
    "filtered_test_examples": sum(r["worker_id"] in common for r in test),
    "final_workers": len(common),
}
(out / "tldr_expected_report.json").write_text(json.dumps(expected, indent=2) + "\n")
print(expected)
