"""Deterministic stand-in model for demos and end-to-end tests.

Parses each prompt it receives — the fixed section layout puts the
target function's pseudocode under its own header — and answers with a
schema-valid payload for the requested task: real variables renamed
with their declared types kept, a function name derived from the
target, canned text for the free-text tasks.  No randomness, no
network; the same prompt always yields the same response.
"""

from __future__ import annotations

import json
import re
from types import SimpleNamespace

from ..promptkit import HEADER_TARGET, golden_example, task_for
from ..pseudoc import ParseFailure, parse_pseudocode

_RENAME_FAMILIES = ("vars", "args")
_SINGLE_FAMILIES = ("var", "arg")

#: A line holding nothing but a task tag, parametric forms included
#: (``<vars>``, ``<var:v3>``, ...).  The reasoning markers start with an
#: uppercase letter and cannot match.
_TAG_LINE = re.compile(r"^<[a-z][a-z-]*(?::[A-Za-z_][A-Za-z0-9_]*)?>$",
                       re.MULTILINE)


def _target_section(prompt: str) -> tuple[str, str | None]:
    """(target pseudocode, task tag) recovered from rendered prompt text."""
    tag = None
    tag_pos = -1
    for match in _TAG_LINE.finditer(prompt):
        tag_pos = match.start()
        tag = match.group(0)
    start = prompt.find(HEADER_TARGET)
    if start == -1 or tag is None:
        return "", tag
    start += len(HEADER_TARGET)
    text = prompt[start:tag_pos].strip("\n")
    return text, tag


def _function_name(text: str) -> str:
    match = re.search(r"([A-Za-z_]\w*)\s*\(", text)
    return match.group(1) if match else "function"


class MockTransport:
    """Transport double that behaves like a well-trained, boring model."""

    def __init__(self):
        self.calls = 0

    def send(self, cfg, payload: dict) -> dict:
        self.calls += 1
        prompt = payload["messages"][-1]["content"]
        text, tag = _target_section(prompt)
        try:
            task = task_for(tag) if tag else None
        except Exception:
            task = None
        content = self._respond(task, text)
        return {"choices": [{"message": {"content": content}}],
                "usage": {"prompt_tokens": 0, "completion_tokens": 0}}

    def _respond(self, task, text: str) -> str:
        reasoning = ("<Thought>\nThe target's loop structure, calls, and "
                     "operand widths identify its role; names follow from "
                     "observed usage.\n</Thought>")
        if task is None:
            return reasoning + "\n" + json.dumps({"summary": "No task tag found."})
        payload = golden_example(task)
        try:
            fn = parse_pseudocode(SimpleNamespace(pseudocode=text, name="",
                                                  project="", binary="",
                                                  address=0, external=False))
        except ParseFailure:
            fn = None
        if task.family == "funcname" and fn is not None:
            payload = {"function_name": f"renamed_{_function_name(text)}"}
        elif task.family in _RENAME_FAMILIES and fn is not None:
            decls = fn.params if task.family == "args" else fn.variables()
            payload = {"variables": [
                {"old": d.name, "new_name": f"renamed_{d.name}",
                 "new_type": d.declared_type or "int"}
                for d in decls[:8]]}
        elif task.family in _SINGLE_FAMILIES and fn is not None and task.variable:
            decl = next((d for d in fn.variables()
                         if d.name == task.variable), None)
            payload = {"variables": [
                {"old": task.variable,
                 "new_name": f"renamed_{task.variable}",
                 "new_type": (decl.declared_type if decl and decl.declared_type
                              else "int")}]}
        return reasoning + "\n" + json.dumps(payload)
