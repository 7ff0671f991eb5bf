"""Prompt composition, task ingestion, extraction, and offline evaluation."""

import io
import json
import re

import pytest

from cotlab.promptbench import (
    AuthError,
    BenchItem,
    Demonstration,
    EndpointConfig,
    EvalRecord,
    PromptMode,
    TaskKind,
    TransportError,
    Verdict,
    available_demo_tasks,
    build_prompt,
    capture_wrong_answers,
    extract_answer,
    load_bbh,
    load_demos,
    load_gsm8k,
    main,
    run_eval,
    summarize_modes,
    write_records_csv,
    write_transcripts,
)

GOLDS = {
    "disambiguation_qa": ["A", "A", "C"],
    "penguins_in_a_table": ["B", "B", "D"],
    "tracking_shuffled_objects": ["A", "C", "C"],
    "date_understanding": ["D", "B", "B"],
    "gsm8k": ["6", "5", "39", "8"],
}


def _mc_item(gold="A", question="Pick one.\nOptions:\n(A) yes\n(B) no"):
    return BenchItem(id="it-0", question=question, gold=gold, kind=TaskKind.MULTIPLE_CHOICE)


def _demo(**kwargs):
    defaults = dict(
        question="What color is the sky?\nOptions:\n(A) blue\n(B) green",
        correct_answer="The sky is blue. So the answer is (A).",
        wrong_answer="The sky is green. So the answer is (B).",
        error_explanation="Green is the grass, not the sky.",
    )
    defaults.update(kwargs)
    return Demonstration(**defaults)


# Shipped corpus


def test_corpus_tasks_present():
    assert available_demo_tasks() == sorted(GOLDS)


@pytest.mark.parametrize("task", sorted(GOLDS))
def test_corpus_self_consistency(task):
    box = load_demos(task)
    assert [d.gold for d in box.demonstrations] == GOLDS[task]
    for demo in box.demonstrations:
        assert demo.supports(PromptMode.STANDARD)
        assert demo.supports(PromptMode.WITH_IR)
        assert demo.supports(PromptMode.IR_NO_EE)
        # self-consistency: the final sentence alone reproduces the gold
        final = demo.correct_answer.strip().splitlines()[-1]
        assert extract_answer(final, box.kind) == demo.gold


def test_corpus_demo_counts_and_kinds():
    for task, golds in GOLDS.items():
        box = load_demos(task)
        assert len(box.demonstrations) == len(golds)
        expected = TaskKind.NUMERIC if task == "gsm8k" else TaskKind.MULTIPLE_CHOICE
        assert box.kind is expected
    assert load_demos("gsm8k").instruction == ""


def test_corpus_keeps_source_quirks_verbatim():
    tracking = load_demos("tracking_shuffled_objects").demonstrations
    assert "Bob Alice has the white ball" in tracking[1].wrong_answer
    assert tracking[2].wrong_answer.endswith("Alice: Lola, Bob: Rodrigo, Claire: Patrick.")
    assert "has switch partners for twice" in tracking[2].error_explanation

    penguins = load_demos("penguins_in_a_table").demonstrations
    assert "alphabetical order is Gwen" in penguins[2].correct_answer
    assert "alphabetic order is Gwen" in penguins[2].correct_answer

    disambiguation = load_demos("disambiguation_qa").demonstrations
    assert "“The psychologist took the day off" in disambiguation[0].wrong_answer
    assert disambiguation[2].correct_answer.startswith("Let’s think step by step.")

    assert "then and if" in load_demos("date_understanding").demonstrations[2].correct_answer


def test_unknown_demo_task_lists_available():
    with pytest.raises(KeyError, match="penguins_in_a_table"):
        load_demos("unknown_task")


# Prompt composition


def test_with_ir_block_ordering():
    box = load_demos("date_understanding")
    prompt = build_prompt(box.demonstrations, _mc_item(), PromptMode.WITH_IR, box.instruction)
    assert prompt.startswith("Infer the date from context.")
    blocks = prompt.split("\n\n")
    assert len(blocks) == 1 + 3 + 1
    for block in blocks[1:-1]:
        q = block.index("Q: ")
        wrong = block.index("Wrong Answer: ")
        error = block.index("Error: ")
        correct = block.index("Correct Answer: ")
        assert q < wrong < error < correct
    assert blocks[-1] == f"Q: {_mc_item().question}\nA:"


def test_standard_and_ablation_markers():
    demos = load_demos("penguins_in_a_table").demonstrations
    standard = build_prompt(demos, _mc_item(), PromptMode.STANDARD)
    assert "Wrong Answer:" not in standard
    assert "Error:" not in standard

    no_ee = build_prompt(demos, _mc_item(), PromptMode.IR_NO_EE)
    assert "Wrong Answer:" in no_ee
    assert "Error:" not in no_ee
    assert "Correct Answer:" in no_ee


def test_standard_does_not_double_answer_labels():
    demos = load_demos("penguins_in_a_table").demonstrations
    standard = build_prompt(demos, _mc_item(), PromptMode.STANDARD)
    assert "A: A:" not in standard
    # demos without their own label still get one
    plain = build_prompt([_demo()], _mc_item(), PromptMode.STANDARD)
    assert "\nA: The sky is blue." in plain


def test_modes_are_pairwise_distinct():
    demos = [_demo()]
    texts = {
        mode: build_prompt(demos, _mc_item(), mode)
        for mode in (PromptMode.STANDARD, PromptMode.WITH_IR, PromptMode.IR_NO_EE)
    }
    assert len(set(texts.values())) == 3


def test_mode_field_requirements():
    bare = _demo(wrong_answer="", error_explanation="")
    assert bare.supports(PromptMode.STANDARD)
    assert not bare.supports(PromptMode.WITH_IR)
    assert not bare.supports(PromptMode.IR_NO_EE)
    with pytest.raises(ValueError, match="wrong_answer"):
        build_prompt([bare], _mc_item(), PromptMode.WITH_IR)

    no_explanation = _demo(error_explanation="")
    assert no_explanation.supports(PromptMode.IR_NO_EE)
    assert not no_explanation.supports(PromptMode.WITH_IR)
    with pytest.raises(ValueError, match="error_explanation"):
        build_prompt([no_explanation], _mc_item(), PromptMode.WITH_IR)
    assert "Wrong Answer:" in build_prompt([no_explanation], _mc_item(), PromptMode.IR_NO_EE)

    with pytest.raises(ValueError, match="demonstration"):
        build_prompt([], _mc_item(), PromptMode.STANDARD)


def test_demonstration_requires_canonical_ending():
    with pytest.raises(ValueError, match="canonical sentence"):
        _demo(correct_answer="It is definitely blue.")
    with pytest.raises(ValueError, match="canonical sentence"):
        Demonstration(
            question="How many?",
            correct_answer="So the answer is (A).",
            kind=TaskKind.NUMERIC,
        )
    numeric = Demonstration(
        question="How many?", correct_answer="Count them. The answer is 4.", kind=TaskKind.NUMERIC
    )
    assert numeric.gold == "4"


# Extraction


def test_extract_last_occurrence_wins():
    text = "Maybe the answer is (B). On reflection, so the answer is (C)."
    assert extract_answer(text, TaskKind.MULTIPLE_CHOICE) == "C"
    text = "The answer is 12. Wait, the answer is 15."
    assert extract_answer(text, TaskKind.NUMERIC) == "15"


def test_extract_tolerates_decorations():
    assert extract_answer("The answer is 1,234.", TaskKind.NUMERIC) == "1234"
    assert extract_answer("The answer is $18.", TaskKind.NUMERIC) == "18"
    assert extract_answer("The answer is 6.5.", TaskKind.NUMERIC) == "6.5"
    assert extract_answer("The answer is -3.", TaskKind.NUMERIC) == "-3"
    assert extract_answer("So the answer is (B).", TaskKind.MULTIPLE_CHOICE) == "B"


def test_extract_absent_pattern_is_none():
    assert extract_answer("no conclusive statement", TaskKind.MULTIPLE_CHOICE) is None
    assert extract_answer("the answer is (b)", TaskKind.MULTIPLE_CHOICE) is None
    assert extract_answer("the answer is unclear", TaskKind.NUMERIC) is None
    assert extract_answer("", TaskKind.NUMERIC) is None


# Task-file ingestion


def test_load_bbh_normalizes_and_skips(tmp_path):
    path = tmp_path / "some_task.json"
    path.write_text(
        json.dumps(
            {
                "examples": [
                    {"input": "Q1?", "target": "(B)"},
                    {"input": "Q2?", "target": "C"},
                    {"input": "Q3?"},
                    {"input": "Q4?", "target": "(9)"},
                ]
            }
        )
    )
    with pytest.warns(UserWarning, match="skipping record"):
        items = load_bbh(path)
    assert [(i.id, i.gold) for i in items] == [("some_task-0000", "B"), ("some_task-0001", "C")]
    assert all(i.kind is TaskKind.MULTIPLE_CHOICE for i in items)


def test_load_bbh_empty_is_error(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text('{"examples": []}')
    with pytest.raises(ValueError, match="no usable examples"):
        load_bbh(path)


def test_load_gsm8k_marker_and_commas(tmp_path):
    path = tmp_path / "grade.jsonl"
    lines = [
        json.dumps({"question": "Add?", "answer": "Work.\n#### 18"}),
        json.dumps({"question": "Big?", "answer": "Steps... #### 1,234"}),
        "not json at all",
        json.dumps({"question": "No marker", "answer": "just words"}),
        "",
    ]
    path.write_text("\n".join(lines))
    with pytest.warns(UserWarning):
        items = load_gsm8k(path)
    assert [(i.id, i.gold) for i in items] == [("grade-0000", "18"), ("grade-0001", "1234")]
    assert all(i.kind is TaskKind.NUMERIC for i in items)

    empty = tmp_path / "none.jsonl"
    empty.write_text("\n")
    with pytest.raises(ValueError, match="no usable examples"):
        load_gsm8k(empty)


def test_bench_item_validation():
    with pytest.raises(ValueError, match="option letter"):
        BenchItem(id="x", question="q", gold="AB", kind=TaskKind.MULTIPLE_CHOICE)
    with pytest.raises(ValueError, match="not a number"):
        BenchItem(id="x", question="q", gold="many", kind=TaskKind.NUMERIC)
    with pytest.raises(ValueError, match="empty"):
        BenchItem(id="x", question="q", gold="", kind=TaskKind.NUMERIC)


# Offline evaluation


def _endpoint(**kwargs):
    defaults = dict(url="http://mock.invalid/v1/chat", api_key="k", backoff_s=0.0, parallelism=3)
    defaults.update(kwargs)
    return EndpointConfig(**defaults)


def _reply(content):
    return {"choices": [{"message": {"content": content}}]}


def _query_of(payload):
    prompt = payload["messages"][0]["content"]
    return prompt.rsplit("Q: ", 1)[1].removesuffix("\nA:")


def _items(n=4):
    golds = "ABCA"
    return [
        BenchItem(
            id=f"it-{i}",
            question=f"Question number {i}?\nOptions:\n(A) x\n(B) y\n(C) z",
            gold=golds[i],
            kind=TaskKind.MULTIPLE_CHOICE,
        )
        for i in range(n)
    ]


def test_mock_echo_scores_perfectly():
    items = _items()
    answer_for = {item.question: item.gold for item in items}

    def transport(payload):
        assert payload["temperature"] == 0
        assert len(payload["messages"]) == 1 and payload["messages"][0]["role"] == "user"
        return _reply(f"Let me think. So the answer is ({answer_for[_query_of(payload)]}).")

    summary = run_eval(items, [_demo()], PromptMode.WITH_IR, _endpoint(), transport=transport)
    assert summary.accuracy == 1.0
    assert [r.item_id for r in summary.records] == sorted(i.id for i in items)
    assert all(r.verdict is Verdict.CORRECT for r in summary.records)


def test_mock_gibberish_is_all_unparseable():
    items = _items()
    summary = run_eval(
        items, [_demo()], PromptMode.STANDARD, _endpoint(),
        transport=lambda payload: _reply("I cannot commit to anything."),
    )
    assert summary.accuracy == 0.0
    assert all(r.verdict is Verdict.UNPARSEABLE for r in summary.records)
    assert summary.counts["UNPARSEABLE"] == len(items)


def test_mock_eval_is_deterministic():
    items = _items()

    def transport(payload):
        q = _query_of(payload)
        return _reply(f"Chain about {q!r}... So the answer is (B).")

    def run_once():
        summary = run_eval(items, [_demo()], PromptMode.WITH_IR, _endpoint(), transport=transport)
        return [(r.item_id, r.raw_text, r.extracted, r.verdict, r.note) for r in summary.records]

    assert run_once() == run_once()


def test_numeric_equality_rule():
    item = BenchItem(id="n-0", question="How many?", gold="18", kind=TaskKind.NUMERIC)
    numeric_demo = Demonstration(
        question="Count?", correct_answer="The answer is 2.", kind=TaskKind.NUMERIC
    )
    summary = run_eval(
        [item], [numeric_demo], PromptMode.STANDARD, _endpoint(),
        transport=lambda payload: _reply("Compute. The answer is 18.0."),
    )
    assert summary.records[0].extracted == "18"
    assert summary.records[0].verdict is Verdict.CORRECT


def test_transient_failures_retry_then_succeed():
    calls = {"n": 0}

    def flaky(payload):
        calls["n"] += 1
        if calls["n"] < 3:
            raise TransportError("HTTP 503")
        return _reply("So the answer is (A).")

    summary = run_eval(
        _items(1), [_demo()], PromptMode.STANDARD, _endpoint(parallelism=1), transport=flaky
    )
    assert calls["n"] == 3
    assert summary.records[0].verdict is Verdict.CORRECT
    assert summary.records[0].note == ""


def test_persistent_failure_records_note():
    def always_down(payload):
        raise TransportError("HTTP 500")

    summary = run_eval(
        _items(1), [_demo()], PromptMode.STANDARD,
        _endpoint(parallelism=1, max_retries=5), transport=always_down,
    )
    record = summary.records[0]
    assert record.verdict is Verdict.UNPARSEABLE
    assert "after 5 attempts" in record.note
    assert record.raw_text == ""


def test_auth_failure_aborts():
    def rejected(payload):
        raise AuthError("bad key")

    with pytest.raises(AuthError):
        run_eval(_items(2), [_demo()], PromptMode.STANDARD, _endpoint(), transport=rejected)


def test_capture_keeps_only_missed_items():
    items = _items(3)  # golds A, B, C

    def transport(payload):
        q = _query_of(payload)
        if "number 0" in q:
            return _reply("So the answer is (A).")  # correct
        if "number 1" in q:
            return _reply("So the answer is (C).")  # wrong
        return _reply("mumble")  # unparseable

    captured = capture_wrong_answers(items, [_demo()], _endpoint(), transport=transport)
    assert [c["id"] for c in captured] == ["it-1", "it-2"]
    for skeleton in captured:
        assert skeleton["error_explanation"] == ""
        assert skeleton["correct_answer"] == ""
        assert skeleton["gold"]
        assert "question" in skeleton and "wrong_answer" in skeleton


def test_summary_presentation_labels():
    items = _items(2)
    right = lambda payload: _reply(f"So the answer is ({_query_of(payload)[-42]}).")
    good = run_eval(
        items, [_demo()], PromptMode.WITH_IR, _endpoint(),
        transport=lambda p: _reply("So the answer is (A)."),
    )
    base = run_eval(
        items, [_demo()], PromptMode.STANDARD, _endpoint(),
        transport=lambda p: _reply("nothing to see"),
    )
    table = summarize_modes([base, good])
    assert set(table) == {"w/o IR", "w/ IR"}
    assert table["w/o IR"] == 0.0
    assert table["w/ IR"] == 0.5  # golds are A, B


def test_record_csv_and_transcripts():
    items = _items(2)
    summary = run_eval(
        items, [_demo()], PromptMode.WITH_IR, _endpoint(),
        transport=lambda p: _reply("So the answer is (A)."),
    )
    csv_out = io.StringIO()
    write_records_csv(summary, items, csv_out)
    lines = csv_out.getvalue().splitlines()
    assert lines[0] == "id,mode,verdict,extracted,gold"
    assert lines[1] == "it-0,WITH_IR,CORRECT,A,A"
    assert lines[2] == "it-1,WITH_IR,WRONG,A,B"

    jsonl_out = io.StringIO()
    write_transcripts(summary, items, [_demo()], jsonl_out)
    transcripts = [json.loads(line) for line in jsonl_out.getvalue().splitlines()]
    assert len(transcripts) == 2
    rebuilt = build_prompt([_demo()], items[0], PromptMode.WITH_IR)
    assert transcripts[0]["prompt"] == rebuilt
    assert transcripts[0]["raw_text"] == "So the answer is (A)."


# Command-line interface (still zero network: transport injected)


def _bbh_file(tmp_path, n=3):
    path = tmp_path / "mini_task.json"
    examples = [
        {"input": f"Question number {i}?\nOptions:\n(A) x\n(B) y", "target": "(A)"}
        for i in range(n)
    ]
    path.write_text(json.dumps({"examples": examples}))
    return str(path)


def test_cli_eval_writes_artifacts(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("COTBENCH_ENDPOINT", "http://mock.invalid/v1")
    monkeypatch.setenv("COTBENCH_API_KEY", "secret")
    out = tmp_path / "run"
    code = main(
        [
            "eval",
            "--items", _bbh_file(tmp_path),
            "--demos", "date_understanding",
            "--mode", "WITH_IR",
            "--out", str(out),
        ],
        transport=lambda p: _reply("So the answer is (A)."),
    )
    assert code == 0
    assert "accuracy 1.0000" in capsys.readouterr().out
    with open(out / "summary.json") as fp:
        report = json.load(fp)
    assert report["accuracy"] == 1.0
    assert report["counts"]["CORRECT"] == 3
    assert report["presentation"] == {"w/ IR": 1.0}
    assert (out / "records.csv").exists()
    with open(out / "transcripts.jsonl") as fp:
        assert len(fp.readlines()) == 3


def test_cli_capture_writes_skeletons(tmp_path, monkeypatch):
    monkeypatch.setenv("COTBENCH_ENDPOINT", "http://mock.invalid/v1")
    out = tmp_path / "captured.json"
    code = main(
        [
            "capture",
            "--items", _bbh_file(tmp_path),
            "--demos", "date_understanding",
            "--out", str(out),
        ],
        transport=lambda p: _reply("So the answer is (B)."),  # always wrong
    )
    assert code == 0
    with open(out) as fp:
        captured = json.load(fp)
    assert len(captured) == 3
    assert all(c["wrong_answer"] == "So the answer is (B)." for c in captured)


def test_cli_requires_endpoint_env(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("COTBENCH_ENDPOINT", raising=False)
    code = main(
        ["eval", "--items", _bbh_file(tmp_path), "--demos", "gsm8k", "--out", str(tmp_path / "o")],
        transport=lambda p: _reply("x"),
    )
    assert code == 2
    assert "COTBENCH_ENDPOINT" in capsys.readouterr().err


def test_cli_unknown_demo_set(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("COTBENCH_ENDPOINT", "http://mock.invalid/v1")
    code = main(
        ["eval", "--items", _bbh_file(tmp_path), "--demos", "nope", "--out", str(tmp_path / "o")],
        transport=lambda p: _reply("x"),
    )
    assert code == 2
    assert "available" in capsys.readouterr().err
