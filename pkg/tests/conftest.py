import pytest

from mtss.config import parse_config

KINDS = {"rp": "relative_position", "col": "colorization", "ex": "exemplar", "ms": "motion_segmentation"}


def toy_text(tasks=("rp",), seed=0, steps=8, task_extra="", extra="", trunk="units = 2\nwidth = 3\n"):
    """Config text for a tiny trunk; ``task_extra`` is appended to every task section."""
    text = f"[experiment]\nid = toy\nseed = {seed}\n[trunk]\n{trunk}[train]\nmax_steps = {steps}\n{extra}"
    for t in tasks:
        text += f"[task.{t}]\nkind = {KINDS[t]}\nbatch_size = 2\n{task_extra}"
    return text


def toy_config(*args, **kw):
    return parse_config(toy_text(*args, **kw))


@pytest.fixture
def toy():
    return toy_config
