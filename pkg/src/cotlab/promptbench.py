"""Error-aware few-shot prompting against a chat-completions endpoint.

Composes demonstration blocks that pair each question with a labeled wrong
solution, an explanation of its error, and the correct solution; loads
benchmark task files; sends prompts at temperature 0; and scores answers
by the final "answer is" sentence.

The shipped demonstration corpus (five task files under ``data/demos``)
is stored verbatim, typos included; edit nothing there.  Network access
happens only through the injectable transport, so the whole module tests
offline.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import IO, Callable, Sequence

import requests

__all__ = [
    "TaskKind",
    "PromptMode",
    "Verdict",
    "Demonstration",
    "DemoSet",
    "BenchItem",
    "EvalRecord",
    "EvalSummary",
    "EndpointConfig",
    "AuthError",
    "TransportError",
    "available_demo_tasks",
    "load_demos",
    "build_prompt",
    "extract_answer",
    "load_bbh",
    "load_gsm8k",
    "run_eval",
    "capture_wrong_answers",
    "summarize_modes",
    "write_records_csv",
    "write_transcripts",
    "main",
]


class TaskKind(Enum):
    MULTIPLE_CHOICE = "MULTIPLE_CHOICE"
    NUMERIC = "NUMERIC"


class PromptMode(Enum):
    STANDARD = "STANDARD"
    WITH_IR = "WITH_IR"
    IR_NO_EE = "IR_NO_EE"


class Verdict(Enum):
    CORRECT = "CORRECT"
    WRONG = "WRONG"
    UNPARSEABLE = "UNPARSEABLE"


_MC_PATTERN = re.compile(r"answer is \(([A-Z])\)")
_NUM_PATTERN = re.compile(r"answer is \$?(-?[0-9][0-9,]*(?:\.[0-9]+)?)")


def extract_answer(text: str, kind: TaskKind) -> str | None:
    """Answer named by the LAST "answer is" sentence, or None when absent.

    Chains restate candidate answers mid-reasoning, so earlier matches are
    ignored.  Multiple choice expects a parenthesized capital letter;
    numeric accepts commas, a dollar sign, and a trailing period.
    """
    pattern = _MC_PATTERN if kind is TaskKind.MULTIPLE_CHOICE else _NUM_PATTERN
    found = pattern.findall(text)
    if not found:
        return None
    if kind is TaskKind.MULTIPLE_CHOICE:
        return found[-1]
    return _canon_number(found[-1])


def _canon_number(raw: str) -> str:
    value = float(raw.replace(",", ""))
    return str(int(value)) if value.is_integer() else format(value, "g")


def _answers_match(extracted: str, gold: str, kind: TaskKind) -> bool:
    if kind is TaskKind.MULTIPLE_CHOICE:
        return extracted == gold
    return float(extracted) == float(gold)


@dataclass(frozen=True)
class Demonstration:
    """One worked example; the correct answer must end in the canonical sentence."""

    question: str
    correct_answer: str
    wrong_answer: str = ""
    error_explanation: str = ""
    kind: TaskKind = TaskKind.MULTIPLE_CHOICE

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError("demonstration question must be nonempty")
        final = self.correct_answer.strip().splitlines()
        if not final or extract_answer(final[-1], self.kind) is None:
            grammar = (
                'So the answer is (X).'
                if self.kind is TaskKind.MULTIPLE_CHOICE
                else 'The answer is N.'
            )
            raise ValueError(
                f"correct_answer must end with the canonical sentence {grammar!r}"
            )

    @property
    def gold(self) -> str:
        return extract_answer(self.correct_answer, self.kind)

    def supports(self, mode: PromptMode) -> bool:
        if mode is PromptMode.STANDARD:
            return True
        if not self.wrong_answer.strip():
            return False
        return mode is PromptMode.IR_NO_EE or bool(self.error_explanation.strip())


@dataclass(frozen=True)
class DemoSet:
    task: str
    instruction: str
    kind: TaskKind
    demonstrations: tuple[Demonstration, ...]

    def __post_init__(self) -> None:
        if not self.demonstrations:
            raise ValueError(f"demo set {self.task!r} has no demonstrations")


_DEMO_DIR = resources.files("cotlab.data") / "demos"


def available_demo_tasks() -> list[str]:
    return sorted(p.name[: -len(".json")] for p in _DEMO_DIR.iterdir() if p.name.endswith(".json"))


def load_demos(task: str) -> DemoSet:
    """Shipped demonstration set by task name (see available_demo_tasks)."""
    entry = _DEMO_DIR / f"{task}.json"
    try:
        doc = json.loads(entry.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise KeyError(
            f"no demo set named {task!r}; available: {', '.join(available_demo_tasks())}"
        ) from None
    kind = TaskKind(doc["kind"])
    demos = tuple(
        Demonstration(
            question=rec["question"],
            correct_answer=rec["correct_answer"],
            wrong_answer=rec["wrong_answer"],
            error_explanation=rec["error_explanation"],
            kind=kind,
        )
        for rec in doc["demonstrations"]
    )
    return DemoSet(task=doc["task"], instruction=doc["instruction"], kind=kind, demonstrations=demos)


@dataclass(frozen=True)
class BenchItem:
    id: str
    question: str
    gold: str
    kind: TaskKind

    def __post_init__(self) -> None:
        if not self.gold:
            raise ValueError(f"item {self.id}: gold answer is empty")
        if self.kind is TaskKind.MULTIPLE_CHOICE:
            if not re.fullmatch(r"[A-Z]", self.gold):
                raise ValueError(f"item {self.id}: gold {self.gold!r} is not an option letter")
        else:
            try:
                float(self.gold)
            except ValueError:
                raise ValueError(f"item {self.id}: gold {self.gold!r} is not a number") from None


def _demo_block(demo: Demonstration, mode: PromptMode) -> str:
    lines = [f"Q: {demo.question}"]
    if mode is PromptMode.STANDARD:
        correct = demo.correct_answer
        # some shipped demonstrations carry their own "A:" label
        lines.append(correct if correct.startswith("A:") else f"A: {correct}")
        return "\n".join(lines)
    if not demo.wrong_answer.strip():
        raise ValueError(f"mode {mode.value} needs a wrong_answer")
    lines.append(f"Wrong Answer: {demo.wrong_answer}")
    if mode is PromptMode.WITH_IR:
        if not demo.error_explanation.strip():
            raise ValueError("mode WITH_IR needs an error_explanation")
        lines.append(f"Error: {demo.error_explanation}")
    lines.append(f"Correct Answer: {demo.correct_answer}")
    return "\n".join(lines)


def build_prompt(
    demos: Sequence[Demonstration],
    item: BenchItem,
    mode: PromptMode,
    instruction: str = "",
) -> str:
    """Few-shot prompt: optional instruction, demonstration blocks, then the query.

    WITH_IR blocks read question, "Wrong Answer:", "Error:", "Correct
    Answer:" in that order; IR_NO_EE drops the Error line; STANDARD shows
    the correct answer only.  Blocks are blank-line separated and the
    query ends with a bare "A:".
    """
    if not demos:
        raise ValueError("at least one demonstration is required")
    blocks = [instruction] if instruction else []
    blocks.extend(_demo_block(demo, mode) for demo in demos)
    blocks.append(f"Q: {item.question}\nA:")
    return "\n\n".join(blocks)


# Task-file ingestion


def _warn_skip(path: str | Path, index: int, problem: str) -> None:
    warnings.warn(f"{path}: skipping record {index}: {problem}", stacklevel=3)


def load_bbh(path: str | Path) -> list[BenchItem]:
    """BBH task JSON: example objects with ``input`` and ``target`` like "(B)"."""
    with open(path, encoding="utf-8") as fp:
        doc = json.load(fp)
    examples = doc.get("examples") if isinstance(doc, dict) else doc
    if not isinstance(examples, list):
        raise ValueError(f"{path}: expected an examples list")
    stem = Path(path).stem
    items = []
    for i, rec in enumerate(examples):
        try:
            question = rec["input"]
            target = rec["target"].strip()
        except (TypeError, KeyError, AttributeError):
            _warn_skip(path, i, "missing input/target")
            continue
        gold = target[1:-1] if target.startswith("(") and target.endswith(")") else target
        try:
            items.append(
                BenchItem(
                    id=f"{stem}-{i:04d}",
                    question=question,
                    gold=gold.upper(),
                    kind=TaskKind.MULTIPLE_CHOICE,
                )
            )
        except ValueError as err:
            _warn_skip(path, i, str(err))
    if not items:
        raise ValueError(f"{path}: no usable examples")
    return items


def load_gsm8k(path: str | Path) -> list[BenchItem]:
    """GSM8k JSONL: question/answer records, gold after the "#### " marker."""
    stem = Path(path).stem
    items = []
    with open(path, encoding="utf-8") as fp:
        for i, line in enumerate(fp):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                question = rec["question"]
                answer = rec["answer"]
            except (json.JSONDecodeError, TypeError, KeyError):
                _warn_skip(path, i, "not a question/answer object")
                continue
            marker = answer.rfind("#### ")
            if marker < 0:
                _warn_skip(path, i, 'no "#### " marker in answer')
                continue
            gold = answer[marker + 5 :].strip().replace(",", "")
            try:
                items.append(
                    BenchItem(
                        id=f"{stem}-{i:04d}",
                        question=question,
                        gold=gold,
                        kind=TaskKind.NUMERIC,
                    )
                )
            except ValueError as err:
                _warn_skip(path, i, str(err))
    if not items:
        raise ValueError(f"{path}: no usable examples")
    return items


# Endpoint plumbing


class AuthError(RuntimeError):
    """Credentials rejected; the whole run aborts."""


class TransportError(RuntimeError):
    """Transient request failure, eligible for retry."""


Transport = Callable[[dict], dict]


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    api_key: str = ""
    model: str = "gpt-3.5-turbo"
    max_retries: int = 5
    parallelism: int = 4
    timeout_s: float = 60.0
    backoff_s: float = 0.5

    @classmethod
    def from_env(cls, **overrides) -> "EndpointConfig":
        url = os.environ.get("COTBENCH_ENDPOINT")
        if not url:
            raise ValueError("set COTBENCH_ENDPOINT to the chat-completions URL")
        key = os.environ.get("COTBENCH_API_KEY", "")
        return cls(url=url, api_key=key, **overrides)


def http_transport(cfg: EndpointConfig) -> Transport:
    def send(payload: dict) -> dict:
        headers = {"Authorization": f"Bearer {cfg.api_key}"} if cfg.api_key else {}
        try:
            response = requests.post(cfg.url, json=payload, headers=headers, timeout=cfg.timeout_s)
        except requests.RequestException as err:
            raise TransportError(str(err)) from err
        if response.status_code in (401, 403):
            raise AuthError(f"endpoint rejected credentials (HTTP {response.status_code})")
        if response.status_code == 429 or response.status_code >= 500:
            raise TransportError(f"HTTP {response.status_code}")
        response.raise_for_status()
        return response.json()

    return send


@dataclass(frozen=True)
class EvalRecord:
    item_id: str
    mode: PromptMode
    raw_text: str
    extracted: str | None
    verdict: Verdict
    latency_s: float
    note: str = ""


@dataclass(frozen=True)
class EvalSummary:
    mode: PromptMode
    records: tuple[EvalRecord, ...]
    accuracy: float
    counts: dict[str, int]


def _request_with_retries(
    transport: Transport, payload: dict, cfg: EndpointConfig
) -> tuple[str, str]:
    last = "no attempts made"
    for attempt in range(cfg.max_retries):
        try:
            response = transport(payload)
            return response["choices"][0]["message"]["content"], ""
        except TransportError as err:
            last = str(err)
            if attempt + 1 < cfg.max_retries:
                time.sleep(cfg.backoff_s * 2**attempt)
    return "", f"transport failed after {cfg.max_retries} attempts: {last}"


def run_eval(
    items: Sequence[BenchItem],
    demos: Sequence[Demonstration],
    mode: PromptMode,
    endpoint: EndpointConfig,
    instruction: str = "",
    transport: Transport | None = None,
) -> EvalSummary:
    """Score every item with one temperature-0 request each.

    Requests go out with bounded parallelism; records come back sorted by
    item id.  Transient failures retry with exponential backoff up to
    ``max_retries``; an item that never succeeds scores UNPARSEABLE with
    the failure in its note.  AuthError aborts the run.
    """
    if not items:
        raise ValueError("no items to evaluate")
    send = transport if transport is not None else http_transport(endpoint)

    def score(item: BenchItem) -> EvalRecord:
        prompt = build_prompt(demos, item, mode, instruction)
        payload = {
            "model": endpoint.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        started = time.perf_counter()
        text, note = _request_with_retries(send, payload, endpoint)
        latency = time.perf_counter() - started
        extracted = extract_answer(text, item.kind)
        if extracted is None:
            verdict = Verdict.UNPARSEABLE
        elif _answers_match(extracted, item.gold, item.kind):
            verdict = Verdict.CORRECT
        else:
            verdict = Verdict.WRONG
        return EvalRecord(item.id, mode, text, extracted, verdict, latency, note)

    with ThreadPoolExecutor(max_workers=endpoint.parallelism) as pool:
        records = sorted(pool.map(score, items), key=lambda r: r.item_id)
    counts = {v.value: 0 for v in Verdict}
    for record in records:
        counts[record.verdict.value] += 1
    accuracy = counts[Verdict.CORRECT.value] / len(records)
    return EvalSummary(mode=mode, records=tuple(records), accuracy=accuracy, counts=counts)


def summarize_modes(summaries: Sequence[EvalSummary]) -> dict[str, float]:
    """Accuracy keyed by the presentation labels for each prompt mode."""
    labels = {
        PromptMode.STANDARD: "w/o IR",
        PromptMode.WITH_IR: "w/ IR",
        PromptMode.IR_NO_EE: "w/ IR (no EE)",
    }
    return {labels[s.mode]: s.accuracy for s in summaries}


def capture_wrong_answers(
    items: Sequence[BenchItem],
    demos: Sequence[Demonstration],
    endpoint: EndpointConfig,
    instruction: str = "",
    transport: Transport | None = None,
) -> list[dict]:
    """Model-generated wrong answers, as skeletons for manual explanation writing.

    Runs a STANDARD evaluation and keeps the items the model missed; the
    error_explanation field is left empty on purpose (explanations are
    authored by hand, not generated).
    """
    summary = run_eval(items, demos, PromptMode.STANDARD, endpoint, instruction, transport)
    by_id = {item.id: item for item in items}
    captured = []
    for record in summary.records:
        if record.verdict is Verdict.CORRECT:
            continue
        item = by_id[record.item_id]
        captured.append(
            {
                "id": item.id,
                "question": item.question,
                "gold": item.gold,
                "wrong_answer": record.raw_text,
                "error_explanation": "",
                "correct_answer": "",
            }
        )
    return captured


def write_records_csv(summary: EvalSummary, items: Sequence[BenchItem], fp: IO[str]) -> None:
    gold = {item.id: item.gold for item in items}
    writer = csv.writer(fp, lineterminator="\n")
    writer.writerow(["id", "mode", "verdict", "extracted", "gold"])
    for r in summary.records:
        writer.writerow([r.item_id, r.mode.value, r.verdict.value, r.extracted or "", gold[r.item_id]])


def write_transcripts(
    summary: EvalSummary,
    items: Sequence[BenchItem],
    demos: Sequence[Demonstration],
    fp: IO[str],
    instruction: str = "",
) -> None:
    """Raw-exchange JSONL for auditing; prompts are rebuilt deterministically."""
    by_id = {item.id: item for item in items}
    for r in summary.records:
        prompt = build_prompt(demos, by_id[r.item_id], summary.mode, instruction)
        record = {
            "id": r.item_id,
            "mode": r.mode.value,
            "prompt": prompt,
            "raw_text": r.raw_text,
            "latency_s": r.latency_s,
            "note": r.note,
        }
        fp.write(json.dumps(record, ensure_ascii=False) + "\n")


# Command-line interface


def _load_items(path: str, file_format: str, limit: int | None) -> list[BenchItem]:
    if file_format == "auto":
        file_format = "gsm8k" if path.endswith(".jsonl") else "bbh"
    items = load_gsm8k(path) if file_format == "gsm8k" else load_bbh(path)
    return items[:limit] if limit else items


def _cmd_eval(args: argparse.Namespace, transport: Transport | None) -> int:
    demo_set = load_demos(args.demos)
    items = _load_items(args.items, args.format, args.limit)
    endpoint = EndpointConfig.from_env(
        model=args.model, parallelism=args.parallelism, max_retries=args.max_retries
    )
    mode = PromptMode(args.mode)
    summary = run_eval(items, demo_set.demonstrations, mode, endpoint, demo_set.instruction, transport)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "records.csv", "w", encoding="utf-8") as fp:
        write_records_csv(summary, items, fp)
    with open(out / "transcripts.jsonl", "w", encoding="utf-8") as fp:
        write_transcripts(summary, items, demo_set.demonstrations, fp, demo_set.instruction)
    with open(out / "summary.json", "w", encoding="utf-8") as fp:
        json.dump(
            {
                "task": demo_set.task,
                "mode": mode.value,
                "items": len(items),
                "accuracy": summary.accuracy,
                "counts": summary.counts,
                "presentation": summarize_modes([summary]),
            },
            fp,
            indent=2,
        )
        fp.write("\n")
    print(f"{demo_set.task} {mode.value}: accuracy {summary.accuracy:.4f} over {len(items)} items")
    return 0


def _cmd_capture(args: argparse.Namespace, transport: Transport | None) -> int:
    demo_set = load_demos(args.demos)
    items = _load_items(args.items, args.format, args.limit)
    endpoint = EndpointConfig.from_env(
        model=args.model, parallelism=args.parallelism, max_retries=args.max_retries
    )
    captured = capture_wrong_answers(
        items, demo_set.demonstrations, endpoint, demo_set.instruction, transport
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fp:
        json.dump(captured, fp, ensure_ascii=False, indent=2)
        fp.write("\n")
    print(f"captured {len(captured)} wrong answers from {len(items)} items -> {out}")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--items", required=True, help="benchmark task file")
    parser.add_argument(
        "--format", choices=["auto", "bbh", "gsm8k"], default="auto",
        help="task file layout (auto: .jsonl means gsm8k)",
    )
    parser.add_argument(
        "--demos", required=True,
        help=f"shipped demo set name ({', '.join(available_demo_tasks())})",
    )
    parser.add_argument("--model", default="gpt-3.5-turbo")
    parser.add_argument("--limit", type=int, default=None, help="evaluate only the first N items")
    parser.add_argument("--parallelism", type=int, default=4)
    parser.add_argument("--max-retries", type=int, default=5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cotbench",
        description="Evaluate error-aware few-shot prompts on benchmark tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_eval = sub.add_parser("eval", help="score a task file under one prompt mode")
    _add_common(p_eval)
    p_eval.add_argument("--mode", choices=[m.value for m in PromptMode], default="WITH_IR")
    p_eval.add_argument("--out", required=True, help="output directory")
    p_eval.set_defaults(func=_cmd_eval)

    p_cap = sub.add_parser(
        "capture", help="collect the model's wrong answers for manual explanation authoring"
    )
    _add_common(p_cap)
    p_cap.add_argument("--out", required=True, help="output JSON file")
    p_cap.set_defaults(func=_cmd_capture)
    return parser


def main(argv: Sequence[str] | None = None, transport: Transport | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, transport)
    except (KeyError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except AuthError as err:
        print(f"authentication failed: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
