"""Error-aware prompting end to end, no network required.

Builds the three prompt modes from a shipped demonstration set, shows the
answer extractor at work, then runs a full evaluation against a mock
endpoint injected as a transport.
"""

from cotlab.promptbench import (
    BenchItem,
    EndpointConfig,
    PromptMode,
    TaskKind,
    build_prompt,
    extract_answer,
    load_demos,
    run_eval,
    summarize_modes,
)

box = load_demos("date_understanding")
item = BenchItem(
    id="demo-0",
    question=(
        "Yesterday was April 30, 2021. What is the date today in MM/DD/YYYY?\n"
        "Options:\n(A) 05/01/2021\n(B) 02/23/2021\n(C) 04/01/2021"
    ),
    gold="A",
    kind=TaskKind.MULTIPLE_CHOICE,
)

print("=== WITH_IR prompt (wrong answer + error explanation + correct answer) ===")
prompt = build_prompt(box.demonstrations[:1], item, PromptMode.WITH_IR, box.instruction)
print(prompt[:600] + "\n[...]\n" + prompt[-120:])

print()
print("=== the same demonstration in the two other modes ===")
for mode in (PromptMode.STANDARD, PromptMode.IR_NO_EE):
    text = build_prompt(box.demonstrations[:1], item, mode, box.instruction)
    markers = [m for m in ("Wrong Answer:", "Error:", "Correct Answer:") if m in text]
    print(f"{mode.name}: {len(text)} chars, markers {markers or ['none']}")

print()
print("=== answer extraction takes the last canonical statement ===")
reply = "It could be (B). But April has 30 days, so the answer is (A)."
print(f"reply:     {reply!r}")
print(f"extracted: {extract_answer(reply, TaskKind.MULTIPLE_CHOICE)!r}")
print(f"numeric:   {extract_answer('The answer is 1,234.', TaskKind.NUMERIC)!r}")

print()
print("=== offline evaluation against a scripted endpoint ===")
script = {
    "demo-0": "Yesterday was the last day of April. So the answer is (A).",
    "demo-1": "Rambling with no commitment.",
}
items = [item, BenchItem(id="demo-1", question="What day follows Monday?\nOptions:\n(A) Tuesday",
                         gold="A", kind=TaskKind.MULTIPLE_CHOICE)]

def transport(payload):
    prompt = payload["messages"][0]["content"]
    for item_id, reply in script.items():
        if items[int(item_id[-1])].question in prompt:
            return {"choices": [{"message": {"content": reply}}]}
    raise AssertionError("unexpected prompt")

endpoint = EndpointConfig(url="http://mock.invalid/v1/chat/completions", backoff_s=0.0)
summary = run_eval(items, box.demonstrations, PromptMode.WITH_IR, endpoint,
                   instruction=box.instruction, transport=transport)
for record in summary.records:
    print(f"  {record.item_id}: {record.verdict.name:<12} extracted={record.extracted!r}")
print(f"accuracy {summary.accuracy:.2f}, presentation {summarize_modes([summary])}")
