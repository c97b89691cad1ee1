"""Prompt rendering: item lines, recommendation questions, reasoning-synthesis turns."""

from __future__ import annotations

from dataclasses import dataclass

from .data import HistoryWindow, Item

THINKING = "thinking"
RECOMMEND = "recommend"

OPEN, CLOSE = "〈", "〉"


def feat_slot(item_id: int) -> str:
    return f"{OPEN}FEAT:{item_id}{CLOSE}"


def user_slot(user_id: int) -> str:
    return f"{OPEN}USER:{user_id}{CLOSE}"


@dataclass(frozen=True)
class PromptInstance:
    kind: str
    question_text: str
    answer_text: str
    label: int
    user_id: int
    item_id: int


def yes_no(label: int) -> str:
    return "Yes" if label else "No"


def render_item_line(item: Item, label: int, with_feature_slot: bool) -> str:
    if not item.title:
        raise ValueError(f"item {item.item_id} has an empty title")
    feature = f" with feature {feat_slot(item.item_id)}" if with_feature_slot else ""
    kws = ", ".join(item.keywords)
    return f"{item.title}{feature} (label: {yes_no(label).lower()}) with description: {kws}"


def render_history(window: HistoryWindow, with_feature_slot: bool) -> str:
    return "; ".join(render_item_line(it, lab, with_feature_slot) for it, lab in window.entries)


def render_question(window: HistoryWindow, feature_slots: bool, noun: str = "book") -> str:
    """Recommendation question; ``feature_slots`` toggles the user and item placeholders."""
    user_part = (
        f" Additionally, we have information about the user's preferences encoded in the "
        f"feature {user_slot(window.user_id)}."
        if feature_slots
        else ""
    )
    target_feat = f" with the feature {feat_slot(window.target.item_id)}" if feature_slots else ""
    return (
        f"#Question: A user has given ratings to the following {noun}s: "
        f"{render_history(window, feature_slots)}.{user_part} Based on the descriptions and the "
        f"user's enjoyment of each {noun} in the historical sequence, construct a persona of the "
        f"user's preferences and reevaluate whether the user would enjoy the {noun} titled "
        f"{window.target.title}{target_feat}. "
        f'Please begin your analysis with "Yes" or "No". #Answer:'
    )


def render_rec_prompt(
    window: HistoryWindow, feature_slots: bool, noun: str = "book"
) -> PromptInstance:
    return PromptInstance(
        RECOMMEND,
        render_question(window, feature_slots, noun),
        yes_no(window.target_label),
        window.target_label,
        window.user_id,
        window.target.item_id,
    )


def render_think_prompt(
    window: HistoryWindow, reason: str, feature_slots: bool, noun: str = "book"
) -> PromptInstance:
    if not reason.strip():
        raise ValueError("thinking instances need a nonempty reason")
    return PromptInstance(
        THINKING,
        render_question(window, feature_slots, noun),
        f"{yes_no(window.target_label)}. {reason.strip()}",
        window.target_label,
        window.user_id,
        window.target.item_id,
    )


def first_turn_prompt(window: HistoryWindow, noun: str = "book") -> str:
    liked = ", ".join(it.title for it, lab in window.entries if lab)
    return (
        f"A user has given high ratings to the following {noun}s: {liked}. Using all available "
        f"information, make a prediction about whether the user would enjoy the {noun} titled "
        f"{window.target.title}?"
    )


REFLECT_TEMPLATES = (
    "The correct response is {answer}. Reflect on multiple aspects based on historical "
    "information and explain the reason for the oversight based on the previous analysis. "
    "Reanalyze to make a prediction about whether the user would enjoy the {noun} titled {title}?",
    "The accurate answer is {answer}. Delve into various aspects considering historical data, "
    "elucidate the cause of the oversight according to the preceding analysis. Conduct a "
    "reanalysis to forecast whether the user will take pleasure in the {noun} named {title}?",
    "The right response is {answer}. Reflect on a variety of aspects with reference to "
    "historical information, and account for the oversight based on the earlier analysis. "
    "Reanalyze to determine whether the user would appreciate the {noun} titled {title}?",
)


def reflect_prompt(variant: int, window: HistoryWindow, noun: str = "book") -> str:
    return REFLECT_TEMPLATES[variant % len(REFLECT_TEMPLATES)].format(
        answer=yes_no(window.target_label), noun=noun, title=window.target.title
    )
