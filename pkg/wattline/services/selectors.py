"""
Series selector tokenizer.

This is not a full expression parser. It walks a query, finds every
series selector (`name{...}`, `{...}` or a bare metric name) and splits
the matchers, respecting quoted strings and escapes. The gate uses it to
find the workload ids a query touches; the mock TSDB uses it to filter.
"""

import re
from dataclasses import dataclass, field
from typing import Mapping, Optional

from wattline.core.exceptions import InspectionError
from wattline.models.metrics import LabelSet

IDENT_START = re.compile(r"[a-zA-Z_:]")
IDENT = re.compile(r"[a-zA-Z_:][a-zA-Z0-9_:]*")
LABEL_NAME = re.compile(r"[a-zA-Z_][a-zA-Z0-9_]*")
NUMBER = re.compile(r"(?:0[xX][0-9a-fA-F]+|[0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)[a-zA-Z]*")
OPERATORS = ("=~", "!~", "!=", "=")

KEYWORDS = frozenset(
    {
        "and", "or", "unless", "atan2", "bool", "offset", "inf", "nan",
        "sum", "min", "max", "avg", "group", "stddev", "stdvar", "count",
        "count_values", "bottomk", "topk", "quantile", "limitk", "limit_ratio",
    }
)
LABEL_LIST_KEYWORDS = frozenset({"by", "without", "on", "ignoring", "group_left", "group_right"})
ESCAPES = {"n": "\n", "t": "\t", "\\": "\\", '"': '"', "'": "'"}


@dataclass(frozen=True, slots=True)
class Matcher:
    name: str
    op: str
    value: str

    def matches(self, labels: Mapping[str, str]) -> bool:
        actual = labels.get(self.name, "")
        if self.op == "=":
            return actual == self.value
        if self.op == "!=":
            return actual != self.value
        matched = re.fullmatch(self.value, actual) is not None
        return matched if self.op == "=~" else not matched


@dataclass(frozen=True, slots=True)
class Selector:
    metric_name: Optional[str]
    matchers: tuple[Matcher, ...] = ()

    def all_matchers(self) -> tuple[Matcher, ...]:
        if self.metric_name is None:
            return self.matchers
        return (Matcher("__name__", "=", self.metric_name), *self.matchers)

    def matches(self, labels: LabelSet) -> bool:
        mapping = labels.as_dict()
        return all(m.matches(mapping) for m in self.all_matchers())

    def names(self) -> set[str]:
        """Metric names this selector pins by equality"""
        return {m.value for m in self.all_matchers() if m.name == "__name__" and m.op == "="}


def _read_string(query: str, pos: int) -> tuple[str, int]:
    """Read a quoted string starting at pos; returns (value, index after the closing quote)"""
    quote = query[pos]
    pos += 1
    out = []
    while pos < len(query):
        char = query[pos]
        if char == quote:
            return "".join(out), pos + 1
        if char == "\\" and quote != "`":
            if pos + 1 >= len(query):
                break
            escaped = query[pos + 1]
            out.append(ESCAPES.get(escaped, "\\" + escaped))
            pos += 2
            continue
        out.append(char)
        pos += 1
    raise InspectionError(f"unterminated string starting at offset {pos}")


def _skip_space(query: str, pos: int) -> int:
    while pos < len(query) and query[pos].isspace():
        pos += 1
    return pos


def _skip_comment(query: str, pos: int) -> int:
    """pos points at `#`; a comment runs to the end of the line"""
    end = query.find("\n", pos)
    return len(query) if end < 0 else end + 1


def _skip_blank(query: str, pos: int) -> int:
    while True:
        pos = _skip_space(query, pos)
        if pos >= len(query) or query[pos] != "#":
            return pos
        pos = _skip_comment(query, pos)


def _read_matchers(query: str, pos: int) -> tuple[tuple[Matcher, ...], int]:
    """pos points just past `{`; returns matchers and the index after `}`"""
    matchers = []
    while True:
        pos = _skip_space(query, pos)
        if pos >= len(query):
            raise InspectionError("unbalanced braces: selector is not closed")
        if query[pos] == "}":
            return tuple(matchers), pos + 1
        name_match = LABEL_NAME.match(query, pos)
        if name_match is None:
            raise InspectionError(f"expected a label name at offset {pos}")
        pos = _skip_space(query, name_match.end())
        op = next((o for o in OPERATORS if query.startswith(o, pos)), None)
        if op is None:
            raise InspectionError(f"expected a matcher operator at offset {pos}")
        pos = _skip_space(query, pos + len(op))
        if pos >= len(query) or query[pos] not in "\"'`":
            raise InspectionError(f"expected a quoted value at offset {pos}")
        value, pos = _read_string(query, pos)
        if op in ("=~", "!~"):
            try:
                re.compile(value)
            except re.error as e:
                raise InspectionError(f"invalid regex {value!r}: {e}") from None
        matchers.append(Matcher(name_match.group(), op, value))
        pos = _skip_space(query, pos)
        if pos < len(query) and query[pos] == ",":
            pos += 1
        elif pos < len(query) and query[pos] != "}":
            raise InspectionError(f"expected ',' or '}}' at offset {pos}")


def _skip_group(query: str, pos: int, open_char: str, close_char: str) -> int:
    """Skip a bracketed group that holds no selectors (label lists, ranges)"""
    depth = 0
    while pos < len(query):
        char = query[pos]
        if char in "\"'`":
            _, pos = _read_string(query, pos)
            continue
        if char == "#":
            pos = _skip_comment(query, pos)
            continue
        if char == open_char:
            depth += 1
        elif char == close_char:
            depth -= 1
            if depth == 0:
                return pos + 1
        pos += 1
    raise InspectionError(f"unbalanced {open_char}{close_char}")


def find_selectors(query: str) -> list[Selector]:
    selectors: list[Selector] = []
    pos = 0
    parens = 0
    length = len(query)
    while pos < length:
        char = query[pos]
        if char.isspace():
            pos += 1
        elif char in "\"'`":
            _, pos = _read_string(query, pos)
        elif char == "#":
            pos = _skip_comment(query, pos)
        elif char == "{":
            matchers, pos = _read_matchers(query, pos + 1)
            selectors.append(Selector(None, matchers))
        elif char == "}":
            raise InspectionError(f"unbalanced braces: stray '}}' at offset {pos}")
        elif char == "[":
            pos = _skip_group(query, pos, "[", "]")
        elif char == "]":
            raise InspectionError(f"unbalanced brackets at offset {pos}")
        elif char == "(":
            parens += 1
            pos += 1
        elif char == ")":
            parens -= 1
            if parens < 0:
                raise InspectionError(f"unbalanced parentheses at offset {pos}")
            pos += 1
        elif char.isdigit() or (char == "." and pos + 1 < length and query[pos + 1].isdigit()):
            number = NUMBER.match(query, pos)
            pos = number.end() if number and number.end() > pos else pos + 1
        elif IDENT_START.match(char):
            ident = IDENT.match(query, pos).group()
            pos = _skip_blank(query, pos + len(ident))
            lowered = ident.lower()
            if lowered in LABEL_LIST_KEYWORDS:
                if pos < length and query[pos] == "(":
                    pos = _skip_group(query, pos, "(", ")")
            elif pos < length and query[pos] == "{":
                matchers, pos = _read_matchers(query, pos + 1)
                selectors.append(Selector(ident, matchers))
            elif lowered in KEYWORDS or (pos < length and query[pos] == "("):
                continue
            else:
                selectors.append(Selector(ident))
        else:
            pos += 1
    if parens != 0:
        raise InspectionError("unbalanced parentheses")
    return selectors


def parse_selector(text: str) -> Selector:
    """Parse a query that must be exactly one series selector"""
    stripped = text.strip()
    selectors = find_selectors(stripped)
    if len(selectors) != 1:
        raise InspectionError(f"expected a single series selector, got {len(selectors)}")
    selector = selectors[0]
    if selector.metric_name is None:
        if not stripped.startswith("{") or not stripped.endswith("}"):
            raise InspectionError("only plain series selectors are supported")
    else:
        if not stripped.startswith(selector.metric_name):
            raise InspectionError("only plain series selectors are supported")
        rest = stripped[len(selector.metric_name):].strip()
        if rest and not (rest.startswith("{") and rest.endswith("}")):
            raise InspectionError("only plain series selectors are supported")
    if not selector.all_matchers():
        raise InspectionError("selector must have at least one matcher")
    return selector


@dataclass(frozen=True)
class QueryInspection:
    raw_query: str
    workload_ids: frozenset[str] = frozenset()
    metric_names: frozenset[str] = frozenset()
    selectors: tuple[Selector, ...] = ()
    # selectors with no equality matcher on the id label
    unrestricted: tuple[Selector, ...] = field(default=())
    verifiable: bool = True


def extract_workload_ids(query: str, id_label: str = "workload_id") -> QueryInspection:
    """
    Collect the values bound to id_label by `=` matchers. Any other matcher
    on id_label, or an empty value, makes the query non-verifiable.
    """
    selectors = find_selectors(query)
    ids: set[str] = set()
    names: set[str] = set()
    unrestricted = []
    verifiable = True
    for selector in selectors:
        names |= selector.names()
        id_matchers = [m for m in selector.matchers if m.name == id_label]
        if any(m.op != "=" or m.value == "" for m in id_matchers):
            verifiable = False
        equal = [m.value for m in id_matchers if m.op == "=" and m.value]
        if equal:
            ids.update(equal)
        else:
            unrestricted.append(selector)
    return QueryInspection(
        raw_query=query,
        workload_ids=frozenset(ids),
        metric_names=frozenset(names),
        selectors=tuple(selectors),
        unrestricted=tuple(unrestricted),
        verifiable=verifiable,
    )
