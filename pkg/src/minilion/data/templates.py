"""Instruction templates and the tag-hint sentence.

Training templates are grouped by task subtype. The leading image marker of
the original rows is dropped: visual tokens are placed ahead of the text by
the model, not by the string.
"""

from __future__ import annotations

import string
from typing import Mapping

from ..tensor import Rng

HINT_MARKER = "<hint>"

TEMPLATES: dict[str, tuple[str, ...]] = {
    "vqa": (
        "Given the image, answer the following question with no more than three words. {Question}",
        "Based on the image, respond to this question with a short answer: {Question}. Answer:",
        "Use the provided image to answer the question: {Question} Provide your answer as short as possible:",
        'What is the answer to the following question? "{Question}"',
        'The question "{Question}" can be answered using the image. A short answer is',
    ),
    "vqg": (
        "Based on the image, provide a question with the answer: {Answer}. Question:",
        'Given the visual representation, create a question for which the answer is "{Answer}".',
        "From the image provided, craft a question that leads to the reply: {Answer}. Question:",
        "Considering the picture, come up with a question where the answer is: {Answer}.",
        "Taking the image into account, generate an question that has the answer: {Answer}. Question:",
    ),
    "caption": (
        "Can you briefly explain what you see in the image?",
        "Could you use a few words to describe what you perceive in the photo?",
        "Please provide a short depiction of the picture.",
        "Using language, provide a short account of the image.",
        "Use a few words to illustrate what is happening in the picture.",
    ),
    "rec": (
        "Identify the position of {expr} in image and share its coordinates.",
        "I'd like to request the coordinates of {expr} within the photo.",
        "How can I locate {expr} in the image? Please provide the coordinates.",
        "I am interested in knowing the coordinates of {expr} in the picture.",
        "Assist me in locating the position of {expr} in the photograph and its bounding box coordinates.",
        "In the image, I need to find {expr} and know its coordinates. Can you please help?",
    ),
    "reg": (
        "What are the unique characteristics of the rectangular section {BBox} in image?",
        "Describe the novel qualities of the selected bounding box {BBox} in image.",
        "What sets the chosen region {BBox} in image apart from its surroundings?",
        "Provide a one-of-a-kind depiction for the area enclosed by {BBox} in image.",
        "How would you portray the unique features of the designated box {BBox} in image?",
        "Explain the distinguishing characteristics of the marked bounding box {BBox} in image.",
    ),
}

# inference-time instructions, keyed by benchmark family
EVAL_INSTRUCTIONS: dict[str, str] = {
    "vqa": "Question: {Question} Short answer:",
    "caption": "A short image description:",
    "iconqa": "{Question}",
    "vsr": 'Based on the image, is this statement true or false? "{Question}" Answer:',
    "dialog": "Dialog history: {History}\n Question: {Question} Short answer:",
}

TAG_SENTENCE = "According to {hint}, you are allowed to use or partially use the following tags:"


class TemplateError(KeyError):
    def __init__(self, placeholder: str, template: str):
        super().__init__(f"missing slot {placeholder!r} for template {template!r}")
        self.placeholder = placeholder

    def __str__(self) -> str:
        return self.args[0]


def placeholders(template: str) -> list[str]:
    return [name for _, name, _, _ in string.Formatter().parse(template) if name]


def fill(template: str, slots: Mapping[str, str]) -> str:
    for name in placeholders(template):
        if name not in slots:
            raise TemplateError(name, template)
    out = template
    for name in placeholders(template):
        out = out.replace("{" + name + "}", str(slots[name]))
    return out


def render_template(subtype: str, slots: Mapping[str, str] | None = None,
                    index: int | None = None, rng: Rng | None = None) -> str:
    """Fill a training template; ``index`` picks one, else a seeded draw."""
    try:
        rows = TEMPLATES[subtype]
    except KeyError:
        raise KeyError(f"unknown subtype {subtype!r}") from None
    if index is None:
        if rng is None:
            raise ValueError("render_template needs an index or an rng")
        index = rng.randint(len(rows))
    if not 0 <= index < len(rows):
        raise IndexError(f"{subtype} has {len(rows)} templates, index {index} is out of range")
    return fill(rows[index], slots or {})


def render_eval_instruction(family: str, slots: Mapping[str, str] | None = None) -> str:
    return fill(EVAL_INSTRUCTIONS[family], slots or {})


def render_tag_instruction(tags, position: str = "prefix", hint: str = HINT_MARKER) -> str:
    """The tag sentence with the hint marker; an empty list leaves the tail empty.

    ``hint`` can be swapped for plain text to build a hard-tag variant without
    a learnable slot.
    """
    if position != "prefix":
        raise ValueError(f"unsupported tag position {position!r}")
    head = TAG_SENTENCE.format(hint=hint)
    return f"{head} {', '.join(tags)}" if tags else head


def with_tags(instruction: str, tag_sentence: str) -> str:
    return f"{tag_sentence}. {instruction}"
