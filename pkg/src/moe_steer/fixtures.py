"""Published cognitive-expert sets and headline metrics, kept as data.

Rows are the (layer, expert) pairs reported for DeepSeek-R1 and Qwen3-235B,
ranked first to fifth, plus the AIME accuracy / thoughts / token figures
used as replay fixtures for the comparison report.
"""

import re

from .evaluation import MetricsSummary
from .npmi import CognitiveExpertSet
from .trace import ExpertKey, ModelShape

DEEPSEEK_R1_SHAPE = ModelShape(61, 256, 8)
QWEN3_235B_SHAPE = ModelShape(94, 128, 8)

DEEPSEEK_R1_ROWS = {
    "math": "(39, 182) (29, 126) (14, 114) (27, 45) (16, 129)",
    "physics": "(29, 126) (39, 182) (36, 53) (39, 46) (24, 159)",
    "chemistry": "(7, 197) (39, 182) (22, 37) (29, 106) (29, 126)",
    "biology": "(42, 194) (22, 37) (37, 241) (43, 61) (39, 188)",
    "all": "(39, 182) (29, 126) (29, 106) (4, 214) (50, 120)",
}

QWEN3_235B_ROWS = {
    "math": "(39, 182) (29, 126) (14, 114) (27, 45) (16, 129)",
    "physics": "(2, 28) (74, 65) (4, 44) (25, 103) (7, 36)",
    "chemistry": "(32, 58) (26, 30) (68, 35) (37, 57) (25, 103)",
    "biology": "(2, 28) (26, 30) (67, 15) (82, 29) (25, 103)",
    "all": "(25, 103) (26, 30) (82, 29) (67, 15) (37, 57)",
}

# experts steered in the Qwen3 comparison runs (not among the table rows)
QWEN3_STEERED = (ExpertKey(70, 47), ExpertKey(23, 115))

# (benchmark, method) -> accuracy %, thoughts, mean tokens; 30 problems each
HEADLINE_METRICS = {
    ("AIME24", "DeepSeek-R1"): (73.3, 12.0, 9219),
    ("AIME24", "DeepSeek-R1+steer"): (83.3, 10.2, 8317),
    ("AIME25", "DeepSeek-R1"): (63.3, 17.0, 11310),
    ("AIME25", "DeepSeek-R1+steer"): (73.3, 15.2, 12072),
    ("AIME24", "Qwen3-235B"): (86.7, 20.1, 10956),
    ("AIME24", "Qwen3-235B+steer"): (86.7, 16.2, 10722),
    ("AIME25", "Qwen3-235B"): (66.7, 19.7, 15013),
    ("AIME25", "Qwen3-235B+steer"): (73.3, 16.8, 13935),
}

_PAIR = re.compile(r"\(\s*(\d+)\s*,\s*(\d+)\s*\)")


def parse_expert_row(text: str, source_domain: str = "all", l: int | None = None) -> CognitiveExpertSet:
    """Parse ``"(39, 182) (29, 126) ..."`` into a ranked expert set, keeping the first ``l``."""
    pairs = [ExpertKey(int(a), int(b)) for a, b in _PAIR.findall(text)]
    if not pairs:
        raise ValueError(f"no (layer, expert) pairs in {text!r}")
    if l is not None:
        if l > len(pairs):
            raise ValueError(f"l={l} exceeds the {len(pairs)} listed experts")
        pairs = pairs[:l]
    return CognitiveExpertSet(tuple(pairs), source_domain)


def deepseek_r1_experts(domain: str, l: int = 5) -> CognitiveExpertSet:
    return parse_expert_row(DEEPSEEK_R1_ROWS[domain], domain, l)


def qwen3_experts(domain: str, l: int = 5) -> CognitiveExpertSet:
    return parse_expert_row(QWEN3_235B_ROWS[domain], domain, l)


def headline_summary(benchmark: str, method: str, n: int = 30) -> MetricsSummary:
    acc, thoughts, tokens = HEADLINE_METRICS[(benchmark, method)]
    return MetricsSummary(n, acc, thoughts, float(tokens))
