from pathlib import Path

import pytest
import yaml

FIXTURES = Path(__file__).parent / "fixtures"

TOY_FORMAT = {
    "columns": {"user": "user", "item": "item", "behavior": "behavior", "timestamp": "ts"},
    "behavior_map": {b: b for b in ("purchase", "click", "add-to-cart", "add-to-favorite")},
    "header": True,
}


@pytest.fixture
def toy_path():
    return FIXTURES / "toy_interactions.csv"


@pytest.fixture
def toy_expected():
    return yaml.safe_load((FIXTURES / "toy_expected.yaml").read_text())


def labelled(table, behavior=None):
    """Rows of ``table`` as sorted (user, item[, behavior]) tuples with raw id labels."""
    out = []
    for u, i, b in zip(table.users.tolist(), table.items.tolist(), table.behaviors.tolist()):
        name = table.behavior_names[b]
        if behavior == "aux" and name == "purchase" or behavior == "purchase" and name != "purchase":
            continue
        row = (str(table.user_labels[u]), str(table.item_labels[i]))
        out.append(row if behavior == "purchase" else row + (name,))
    return sorted(out)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
