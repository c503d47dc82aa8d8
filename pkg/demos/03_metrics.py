"""Score generated answers against references with the caption metrics.

    python demos/03_metrics.py
"""

from diffvqa.metrics import score_texts

refs = [
    "a new nodule has appeared in the left lower zone",
    "the opacity in the right upper zone has enlarged",
    "no change is observed",
    "the effusion in the left middle zone has disappeared",
]
hyps = [
    "a new nodule has appeared in the left lower zone",
    "the opacity in the right upper zone has shrunk",
    "no change is observed",
    "the nodule in the left middle zone has disappeared",
]
print(score_texts(hyps, refs).table())
print()
print(score_texts(refs, refs).table())
