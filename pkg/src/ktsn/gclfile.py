"""Gate control list config files (YAML).

Example::

    cycle_ns: 1000000
    base_time_ns: 0
    num_classes: 2
    past_txtime_policy: drop        # or send_immediately
    slots:
      - {offset_ns: 0,      length_ns: 500000, open_classes: [0]}
      - {offset_ns: 500000, length_ns: 500000, open_classes: [1]}

Every error carries the line and field it refers to.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

import yaml

from .tas import GateControlList, GateSlot, GclValidationError, PastTxtimePolicy


class GclConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None, source: str = "<gcl>"):
        self.line = line
        self.field = field
        self.source = source
        where = source if line is None else f"{source}:{line}"
        if field:
            where += f" [{field}]"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class GclConfig:
    gcl: GateControlList
    past_txtime_policy: PastTxtimePolicy = PastTxtimePolicy.DROP


def _line(node: yaml.Node) -> int:
    return node.start_mark.line + 1


def _mapping(node: yaml.Node, field: str, source: str) -> dict[str, yaml.Node]:
    if not isinstance(node, yaml.MappingNode):
        raise GclConfigError("expected a mapping", _line(node), field, source)
    out = {}
    for key, value in node.value:
        out[key.value] = value
    return out


def _int(node: yaml.Node, field: str, source: str, minimum: int = 0) -> int:
    try:
        value = yaml.constructor.SafeConstructor().construct_object(node, deep=True)
    except yaml.YAMLError as exc:
        raise GclConfigError(str(exc), _line(node), field, source) from exc
    if isinstance(value, bool) or not isinstance(value, int):
        raise GclConfigError(f"expected an integer, got {value!r}", _line(node), field, source)
    if value < minimum:
        raise GclConfigError(f"must be >= {minimum}, got {value}", _line(node), field, source)
    return value


def _required(mapping: dict[str, yaml.Node], key: str, parent: yaml.Node, prefix: str, source: str) -> yaml.Node:
    if key not in mapping:
        raise GclConfigError("missing required field", _line(parent), prefix + key, source)
    return mapping[key]


def parse_gcl(text: str, source: str = "<gcl>") -> GclConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise GclConfigError(str(exc), mark.line + 1 if mark else None, None, source) from exc
    if root is None:
        raise GclConfigError("empty document", None, None, source)
    top = _mapping(root, "", source)
    known = {"cycle_ns", "base_time_ns", "num_classes", "past_txtime_policy", "slots"}
    for key in top:
        if key not in known:
            raise GclConfigError("unknown field", _line(top[key]), key, source)

    cycle = _int(_required(top, "cycle_ns", root, "", source), "cycle_ns", source)
    base_time = _int(top["base_time_ns"], "base_time_ns", source) if "base_time_ns" in top else 0
    num_classes = _int(top["num_classes"], "num_classes", source, 1) if "num_classes" in top else 2

    policy = PastTxtimePolicy.DROP
    if "past_txtime_policy" in top:
        node = top["past_txtime_policy"]
        try:
            policy = PastTxtimePolicy(str(node.value).lower())
        except ValueError:
            choices = ", ".join(p.value for p in PastTxtimePolicy)
            raise GclConfigError(f"expected one of {choices}, got {node.value!r}", _line(node), "past_txtime_policy", source) from None

    slots_node = _required(top, "slots", root, "", source)
    if not isinstance(slots_node, yaml.SequenceNode):
        raise GclConfigError("expected a list of slots", _line(slots_node), "slots", source)
    slots = []
    slot_lines = []
    for i, item in enumerate(slots_node.value):
        prefix = f"slots[{i}]."
        entry = _mapping(item, f"slots[{i}]", source)
        offset = _int(_required(entry, "offset_ns", item, prefix, source), prefix + "offset_ns", source)
        length = _int(_required(entry, "length_ns", item, prefix, source), prefix + "length_ns", source)
        classes_node = _required(entry, "open_classes", item, prefix, source)
        if not isinstance(classes_node, yaml.SequenceNode):
            raise GclConfigError("expected a list of class ids", _line(classes_node), prefix + "open_classes", source)
        classes = [_int(c, f"{prefix}open_classes[{j}]", source) for j, c in enumerate(classes_node.value)]
        slots.append(GateSlot(offset, length, classes))
        slot_lines.append(_line(item))

    gcl = GateControlList(cycle, tuple(slots), num_classes, base_time)
    try:
        gcl.validate()
    except GclValidationError as exc:
        if exc.slot is not None:
            raise GclConfigError(f"{type(exc).__name__}: {exc}", slot_lines[exc.slot], f"slots[{exc.slot}]", source) from exc
        raise GclConfigError(f"{type(exc).__name__}: {exc}", _line(root), None, source) from exc
    return GclConfig(gcl, policy)


def load_gcl(path) -> GclConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise GclConfigError(f"cannot read GCL file: {exc.strerror or exc}", None, None, str(path)) from exc
    return parse_gcl(text, str(path))


def dump_gcl(config: GclConfig) -> str:
    gcl = config.gcl
    doc: dict[str, Any] = {
        "cycle_ns": gcl.cycle,
        "base_time_ns": gcl.base_time,
        "num_classes": gcl.num_classes,
        "past_txtime_policy": config.past_txtime_policy.value,
        "slots": [
            {"offset_ns": s.offset, "length_ns": s.length, "open_classes": sorted(s.open_classes)} for s in gcl.slots
        ],
    }
    return yaml.safe_dump(doc, sort_keys=False)
