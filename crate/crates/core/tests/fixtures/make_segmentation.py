"""Builds the segmentation fixture corpus with independently computed spans.

Run from this directory: python3 make_segmentation.py > segmentation.jsonl
"""
import json
import math
import re

WORD = rb"[A-Za-z0-9_]"


def tokenize(text):
    """Byte offsets of whitespace-delimited tokens (leading whitespace kept with the token)."""
    b = text.encode()
    return [m.start() for m in re.finditer(rb"\s*\S+", b)] or [0]


def boxed_start(b):
    for m in re.finditer(rb"\\boxed\{", b):
        depth = 0
        for ch in b[m.end() - 1:]:
            if ch == ord("{"):
                depth += 1
            elif ch == ord("}"):
                depth -= 1
                if depth == 0:
                    return m.start()
    return None


def untagged(b, domain):
    hit = None
    if domain == "code":
        i = b.find(b"```")
        hit = (i, "code_fence") if i >= 0 else None
    elif domain == "math":
        i = boxed_start(b)
        hit = (i, "boxed") if i is not None else None
    else:
        m = re.search(rb"(?<!" + WORD + rb")(un)?satisfiable(?!" + WORD + rb")", b, re.I)
        hit = (m.start(), "sat_marker") if m else None
    if hit is None:
        m = re.search(rb"<answer>", b, re.I)
        hit = (m.start(), "xml_tag") if m else None
    if hit is None:
        return (0, len(b)), "fallback_full"
    return (0, hit[0]), hit[1]


def tagged(b):
    m = re.search(rb"<think>(.*?)</think>", b, re.S)
    if m:
        return (m.start(1), m.end(1)), "think_delimiter"
    return (0, 0), "answer_only"


def token_range(start, end, offsets, n_tokens, n_bytes):
    if offsets is not None:
        first = sum(1 for o in offsets if o < start)
        last = sum(1 for o in offsets if o < end)
    else:
        half_up = lambda x: math.floor(x + 0.5)
        length = max(n_bytes, 1)
        first = half_up(start / length * n_tokens)
        last = half_up(end / length * n_tokens)
    return first, max(last - first, 0)


def case(name, domain, tagging, text, with_offsets=True):
    b = text.encode()
    offsets = tokenize(text)
    n_tokens = len(offsets)
    span, source = tagged(b) if tagging == "tagged" else untagged(b, domain)
    first, count = token_range(span[0], span[1], offsets if with_offsets else None, n_tokens, len(b))
    if count == 0:
        span, source, first = (0, 0), "answer_only", 0
    row = {
        "name": name,
        "domain": domain,
        "tagging": tagging,
        "text": text,
        "token_count": n_tokens,
        "expected": {"span": list(span), "source": source, "token_start": first, "token_count": count},
    }
    if with_offsets:
        row["token_offsets"] = offsets
    return row


ANSWER = {
    "code": "```python\nprint(42)\n```",
    "math": "so the answer is \\boxed{42}.",
    "sat": "The formula is SATISFIABLE.",
}
REASON = "Let me think about the constraints first. Then check each case carefully."

cases = []
for d in ["code", "math", "sat"]:
    # tagged
    cases.append(case(f"tagged_{d}_marker", d, "tagged", f"<think>{REASON}</think>\n{ANSWER[d]}"))
    cases.append(case(f"tagged_{d}_marker_prefix", d, "tagged", f"Sure. <think>\n{REASON}\n</think> {ANSWER[d]}"))
    cases.append(case(f"tagged_{d}_no_tags", d, "tagged", f"{REASON} {ANSWER[d]}"))
    cases.append(case(f"tagged_{d}_unclosed", d, "tagged", f"<think>{REASON} {ANSWER[d]}"))
    cases.append(case(f"tagged_{d}_close_only", d, "tagged", f"{REASON}</think> {ANSWER[d]}"))
    cases.append(case(f"tagged_{d}_empty", d, "tagged", f"<think></think> {ANSWER[d]}"))
    cases.append(case(f"tagged_{d}_two_blocks", d, "tagged", f"<think>first pass</think> mid <think>{REASON}</think> {ANSWER[d]}"))
    cases.append(case(f"tagged_{d}_no_offsets", d, "tagged", f"<think>{REASON}</think> {ANSWER[d]}", with_offsets=False))
    # untagged
    cases.append(case(f"untagged_{d}_marker", d, "untagged", f"{REASON} {ANSWER[d]}"))
    cases.append(case(f"untagged_{d}_xml_fallback", d, "untagged", f"{REASON} <ANSWER>42</ANSWER>"))
    cases.append(case(f"untagged_{d}_no_marker", d, "untagged", f"{REASON} The result is 42."))
    cases.append(case(f"untagged_{d}_marker_first", d, "untagged", f"{ANSWER[d]} {REASON}"))
    cases.append(case(f"untagged_{d}_no_offsets", d, "untagged", f"{REASON} {ANSWER[d]}", with_offsets=False))
    cases.append(case(f"untagged_{d}_unicode", d, "untagged", f"Prüfe jede Klausel — ähnlich wie zuvor. {ANSWER[d]}"))

# malformed untagged markers per domain
cases.append(case("untagged_code_two_backticks", "code", "untagged", f"{REASON} ``not a fence`` done"))
cases.append(case("untagged_code_fence_then_xml", "code", "untagged", f"{REASON} ```\nx\n``` <answer>1</answer>"))
cases.append(case("untagged_code_xml_then_fence", "code", "untagged", f"{REASON} <answer>1</answer> ```x```"))
cases.append(case("untagged_math_unbalanced", "math", "untagged", f"{REASON} \\boxed{{42"))
cases.append(case("untagged_math_unbalanced_then_xml", "math", "untagged", f"{REASON} \\boxed{{4 <answer>4</answer>"))
cases.append(case("untagged_math_nested", "math", "untagged", f"{REASON} \\boxed{{\\frac{{1}}{{2}}}}"))
cases.append(case("untagged_math_boxed_no_brace", "math", "untagged", f"{REASON} \\boxed 42"))
cases.append(case("untagged_sat_embedded_word", "sat", "untagged", f"{REASON} satisfiability is hard; unsatisfiablex too."))
cases.append(case("untagged_sat_lowercase", "sat", "untagged", f"{REASON} it is unsatisfiable"))
cases.append(case("untagged_sat_markup", "sat", "untagged", f"{REASON} **UNSATISFIABLE**"))
cases.append(case("untagged_sat_unsat_before_sat", "sat", "untagged", f"{REASON} UNSATISFIABLE, not SATISFIABLE"))
cases.append(case("untagged_sat_sat_before_unsat", "sat", "untagged", f"{REASON} SATISFIABLE, not UNSATISFIABLE"))
cases.append(case("untagged_marker_at_start", "code", "untagged", "```\ncode\n```"))
cases.append(case("untagged_empty", "math", "untagged", ""))

for c in cases:
    print(json.dumps(c, ensure_ascii=False))
