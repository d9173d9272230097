"""
Text exposition format (version 0.0.4) renderer and parser.

Only counter and gauge families are supported. NaN samples are kept in
memory but never written: rendering skips them.
"""

import math
from typing import Iterable, Optional

from wattline.core.exceptions import ParseError, RenderError
from wattline.models.metrics import (
    LABEL_NAME_RE,
    METRIC_NAME_RE,
    LabelSet,
    MetricFamily,
    MetricKind,
    Sample,
)

CONTENT_TYPE = "text/plain; version=0.0.4; charset=utf-8"


def _escape_label_value(value: str) -> str:
    return value.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")


def _escape_help(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\n", "\\n")


def _unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        char = text[i]
        if char == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"n": "\n", "\\": "\\", '"': '"'}.get(nxt, "\\" + nxt))
            i += 2
            continue
        out.append(char)
        i += 1
    return "".join(out)


def format_value(value: float) -> str:
    """Shortest text that parses back to the same float"""
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _sample_key(sample: Sample):
    return (sample.metric_name, sample.labels.pairs, sample.timestamp or -1)


def _check_names(family: MetricFamily) -> None:
    if not METRIC_NAME_RE.match(family.name):
        raise RenderError(f"invalid metric name {family.name!r}")
    for sample in family.samples:
        if not METRIC_NAME_RE.match(sample.metric_name):
            raise RenderError(f"invalid metric name {sample.metric_name!r}")
        for label in sample.labels.names():
            if not LABEL_NAME_RE.match(label):
                raise RenderError(
                    f"invalid label name {label!r} on metric {sample.metric_name!r}"
                )


def render_sample(sample: Sample) -> str:
    line = sample.metric_name
    if sample.labels.pairs:
        body = ",".join(
            f'{name}="{_escape_label_value(value)}"' for name, value in sample.labels.pairs
        )
        line += "{" + body + "}"
    line += " " + format_value(sample.value)
    if sample.timestamp is not None:
        line += f" {sample.timestamp}"
    return line


def render_exposition(families: Iterable[MetricFamily]) -> str:
    """Render families in canonical order; NaN samples are skipped"""
    lines: list[str] = []
    for fam in sorted(families, key=lambda f: f.name):
        _check_names(fam)
        lines.append(f"# HELP {fam.name} {_escape_help(fam.help)}")
        lines.append(f"# TYPE {fam.name} {fam.kind.value}")
        for sample in sorted(fam.samples, key=_sample_key):
            if math.isnan(sample.value):
                continue
            lines.append(render_sample(sample))
    if not lines:
        return ""
    return "\n".join(lines) + "\n"


def canonicalize(families: Iterable[MetricFamily]) -> list[MetricFamily]:
    """Canonical form used by the round-trip law: sorted, NaN samples dropped"""
    return [
        MetricFamily(
            name=fam.name,
            kind=fam.kind,
            help=fam.help,
            samples=tuple(
                s for s in sorted(fam.samples, key=_sample_key) if not math.isnan(s.value)
            ),
        )
        for fam in sorted(families, key=lambda f: f.name)
    ]


class _FamilyBuilder:
    __slots__ = ("name", "kind", "help", "samples")

    def __init__(self, name: str, kind: MetricKind, help: str = ""):
        self.name = name
        self.kind = kind
        self.help = help
        self.samples: list[Sample] = []

    def build(self) -> MetricFamily:
        return MetricFamily(self.name, self.kind, self.help, tuple(self.samples))


def _read_name(line: str, pos: int, lineno: int, pattern) -> tuple[str, int]:
    end = pos
    while end < len(line) and (line[end].isalnum() or line[end] in "_:"):
        end += 1
    name = line[pos:end]
    if not name or not pattern.match(name):
        raise ParseError(lineno, f"expected a name at column {pos + 1}")
    return name, end


def _parse_labels(line: str, pos: int, lineno: int) -> tuple[LabelSet, int]:
    """Parse `{a="x",b="y"}` starting at the opening brace"""
    pairs: list[tuple[str, str]] = []
    pos += 1
    while True:
        while pos < len(line) and line[pos] == " ":
            pos += 1
        if pos >= len(line):
            raise ParseError(lineno, "unterminated label set")
        if line[pos] == "}":
            pos += 1
            break
        name, pos = _read_name(line, pos, lineno, LABEL_NAME_RE)
        if pos >= len(line) or line[pos] != "=":
            raise ParseError(lineno, f"expected '=' after label {name!r}")
        pos += 1
        if pos >= len(line) or line[pos] != '"':
            raise ParseError(lineno, f"expected quoted value for label {name!r}")
        pos += 1
        start = pos
        while pos < len(line) and line[pos] != '"':
            pos += 2 if line[pos] == "\\" else 1
        if pos >= len(line):
            raise ParseError(lineno, f"unterminated value for label {name!r}")
        pairs.append((name, _unescape(line[start:pos])))
        pos += 1
        while pos < len(line) and line[pos] == " ":
            pos += 1
        if pos < len(line) and line[pos] == ",":
            pos += 1
        elif pos < len(line) and line[pos] != "}":
            raise ParseError(lineno, "expected ',' or '}' in label set")
    try:
        return LabelSet(tuple(pairs)), pos
    except ValueError as e:
        raise ParseError(lineno, str(e)) from e


def _parse_sample(line: str, lineno: int) -> Sample:
    name, pos = _read_name(line, 0, lineno, METRIC_NAME_RE)
    labels = LabelSet()
    if pos < len(line) and line[pos] == "{":
        labels, pos = _parse_labels(line, pos, lineno)
    rest = line[pos:]
    if not rest[:1].isspace():
        raise ParseError(lineno, f"expected whitespace before value of {name!r}")
    fields = rest.split()
    if not 1 <= len(fields) <= 2:
        raise ParseError(lineno, f"expected value and optional timestamp for {name!r}")
    try:
        value = float(fields[0])
    except ValueError as e:
        raise ParseError(lineno, f"invalid value {fields[0]!r}") from e
    if math.isinf(value):
        raise ParseError(lineno, f"infinite value for {name!r}")
    timestamp: Optional[int] = None
    if len(fields) == 2:
        try:
            timestamp = int(fields[1])
        except ValueError as e:
            raise ParseError(lineno, f"invalid timestamp {fields[1]!r}") from e
    return Sample(name, labels, value, timestamp)


def parse_exposition(text: str) -> list[MetricFamily]:
    """Parse exposition text into families, in order of appearance"""
    families: dict[str, _FamilyBuilder] = {}
    pending_help: dict[str, str] = {}
    current: Optional[_FamilyBuilder] = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line.split(None, 3)
            if len(parts) >= 3 and parts[1] == "HELP":
                help_text = _unescape(parts[3]) if len(parts) == 4 else ""
                if parts[2] in families:
                    families[parts[2]].help = help_text
                else:
                    pending_help[parts[2]] = help_text
            elif len(parts) >= 2 and parts[1] == "TYPE":
                if len(parts) != 4:
                    raise ParseError(lineno, "malformed TYPE line")
                name, kind = parts[2], parts[3]
                if not METRIC_NAME_RE.match(name):
                    raise ParseError(lineno, f"invalid metric name {name!r}")
                if name in families:
                    raise ParseError(lineno, f"duplicate TYPE for {name!r}")
                try:
                    metric_kind = MetricKind(kind)
                except ValueError:
                    raise ParseError(lineno, f"unsupported metric type {kind!r}") from None
                current = _FamilyBuilder(name, metric_kind, pending_help.pop(name, ""))
                families[name] = current
            continue

        sample = _parse_sample(line, lineno)
        if current is not None and sample.metric_name.startswith(current.name):
            target = current
        else:
            target = families.get(sample.metric_name)
            if target is None:
                target = _FamilyBuilder(
                    sample.metric_name,
                    MetricKind.GAUGE,
                    pending_help.pop(sample.metric_name, ""),
                )
                families[sample.metric_name] = target
        if target.kind is MetricKind.COUNTER and sample.value < 0:
            raise ParseError(lineno, f"negative value for counter {target.name!r}")
        target.samples.append(sample)

    return [builder.build() for builder in families.values()]
