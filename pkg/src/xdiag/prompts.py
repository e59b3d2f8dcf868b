"""Attribute schemas and a deterministic prompt-template grammar.

Template grammar: ``{name}`` is a placeholder for attribute family ``name``;
``[ ... ]`` is an optional block containing exactly one placeholder, dropped
entirely when that family is unassigned; ``\\{ \\} \\[ \\]`` escape the four
delimiters. Everything else is literal text.

Families can be fixed to one value, marginalized over all their values, or
absent (their optional blocks drop). This three-state handling drives both
slice generation and Shapley coalitions.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class TemplateError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered attribute families; one family's values map to class labels."""

    families: tuple[tuple[str, tuple[str, ...]], ...]
    class_family: str
    class_values: tuple[str, ...]
    class_value_to_label: Mapping[str, int] | None = None

    def validate(self) -> None:
        names = [name for name, _ in self.families]
        if len(set(names)) != len(names):
            raise SchemaError("family names must be unique")
        for name, values in self.families:
            if not values:
                raise SchemaError(f"family {name!r} has no values")
            if len(set(values)) != len(values):
                raise SchemaError(f"family {name!r} has duplicate values")
        if self.class_family not in names:
            raise SchemaError(f"class family {self.class_family!r} not among families")
        mapping = self.value_to_label()
        class_values = dict(self.families)[self.class_family]
        for v in class_values:
            if v not in mapping:
                raise SchemaError(f"class-family value {v!r} has no class index")
        covered = set(mapping.values())
        if covered != set(range(len(self.class_values))):
            raise SchemaError("every class index must be covered by some class-family value")

    def value_to_label(self) -> dict[str, int]:
        if self.class_value_to_label is not None:
            return {k: int(v) for k, v in self.class_value_to_label.items()}
        return {v: i for i, v in enumerate(self.class_values)}

    def family_values(self, name: str) -> tuple[str, ...]:
        for fam, values in self.families:
            if fam == name:
                return values
        raise SchemaError(f"unknown family {name!r}")

    def family_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.families)

    def to_json_dict(self) -> dict:
        out = {
            "families": [{"name": name, "values": list(values)} for name, values in self.families],
            "class_family": self.class_family,
            "class_values": list(self.class_values),
        }
        if self.class_value_to_label is not None:
            out["class_value_to_label"] = {k: int(v) for k, v in self.class_value_to_label.items()}
        return out

    @classmethod
    def from_json_dict(cls, obj: dict) -> "AttributeSchema":
        schema = cls(
            families=tuple((f["name"], tuple(f["values"])) for f in obj["families"]),
            class_family=obj["class_family"],
            class_values=tuple(obj["class_values"]),
            class_value_to_label=obj.get("class_value_to_label"),
        )
        schema.validate()
        return schema


def load_schema(path: str | Path) -> AttributeSchema:
    return AttributeSchema.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# template parsing and rendering

#: segment kinds
LITERAL = "literal"
PLACEHOLDER = "placeholder"
OPTIONAL = "optional"


@dataclass(frozen=True)
class Segment:
    kind: str
    text: str = ""  # literal text, or the optional block's prefix
    family: str = ""
    suffix: str = ""  # optional block's text after the placeholder


@dataclass(frozen=True)
class Template:
    source: str
    segments: tuple[Segment, ...]

    def families(self) -> tuple[str, ...]:
        return tuple(s.family for s in self.segments if s.kind in (PLACEHOLDER, OPTIONAL))

    def mandatory_families(self) -> tuple[str, ...]:
        return tuple(s.family for s in self.segments if s.kind == PLACEHOLDER)


_ESCAPES = {"{": "{", "}": "}", "[": "[", "]": "]"}


def _scan(source: str):
    """Yield ("lit", ch) / ("open_ph"|"close_ph"|"open_opt"|"close_opt", ch)."""
    i = 0
    while i < len(source):
        ch = source[i]
        if ch == "\\":
            if i + 1 >= len(source) or source[i + 1] not in _ESCAPES:
                found = source[i + 1] if i + 1 < len(source) else "<end>"
                raise TemplateError(f"unknown escape \\{found} at position {i}")
            yield "lit", _ESCAPES[source[i + 1]]
            i += 2
            continue
        if ch == "{":
            yield "open_ph", ch
        elif ch == "}":
            yield "close_ph", ch
        elif ch == "[":
            yield "open_opt", ch
        elif ch == "]":
            yield "close_opt", ch
        else:
            yield "lit", ch
        i += 1


def parse_template(source: str) -> Template:
    """Parse template source text; see the module docstring for the grammar."""
    segments: list[Segment] = []
    literal: list[str] = []
    in_opt = False
    opt_prefix = ""
    opt_family: str | None = None
    ph: list[str] | None = None  # accumulating a placeholder name

    def flush_literal() -> None:
        nonlocal literal
        if literal:
            segments.append(Segment(kind=LITERAL, text="".join(literal)))
            literal = []

    for kind, ch in _scan(source):
        if ph is not None:
            if kind == "close_ph":
                family = "".join(ph)
                if not family:
                    raise TemplateError("empty placeholder name")
                if in_opt:
                    if opt_family is not None:
                        raise TemplateError("optional block contains more than one placeholder")
                    opt_family = family
                    opt_prefix = "".join(literal)
                    literal = []
                else:
                    flush_literal()
                    segments.append(Segment(kind=PLACEHOLDER, family=family))
                ph = None
            elif kind == "lit":
                ph.append(ch)
            else:
                raise TemplateError(f"unbalanced brackets inside placeholder in {source!r}")
            continue
        if kind == "lit":
            literal.append(ch)
        elif kind == "open_ph":
            ph = []
        elif kind == "close_ph":
            raise TemplateError(f"unbalanced '}}' in {source!r}")
        elif kind == "open_opt":
            if in_opt:
                raise TemplateError("optional blocks cannot nest")
            flush_literal()
            in_opt = True
            opt_family = None
            opt_prefix = ""
        elif kind == "close_opt":
            if not in_opt:
                raise TemplateError(f"unbalanced ']' in {source!r}")
            if opt_family is None:
                raise TemplateError("optional block contains no placeholder")
            segments.append(
                Segment(kind=OPTIONAL, text=opt_prefix, family=opt_family, suffix="".join(literal))
            )
            literal = []
            in_opt = False
            opt_family = None
    if ph is not None:
        raise TemplateError(f"unbalanced '{{' in {source!r}")
    if in_opt:
        raise TemplateError(f"unbalanced '[' in {source!r}")
    flush_literal()

    template = Template(source=source, segments=tuple(segments))
    families = template.families()
    if len(set(families)) != len(families):
        dup = next(f for f in families if families.count(f) > 1)
        raise TemplateError(f"duplicate family {dup!r} in template")
    return template


def render(template: Template, assignment: Mapping[str, str]) -> str:
    """Substitute placeholders; optional blocks emit iff their family is assigned."""
    parts: list[str] = []
    for seg in template.segments:
        if seg.kind == LITERAL:
            parts.append(seg.text)
        elif seg.kind == PLACEHOLDER:
            if seg.family not in assignment:
                raise TemplateError(f"missing mandatory family {seg.family!r}")
            parts.append(assignment[seg.family])
        else:
            if seg.family in assignment:
                parts.append(seg.text + assignment[seg.family] + seg.suffix)
    return "".join(parts)


def load_templates(path: str | Path) -> list[Template]:
    sources = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(sources, list) or not all(isinstance(s, str) for s in sources):
        raise TemplateError(f"template file {path} must be a JSON array of strings")
    return [parse_template(s) for s in sources]


# ---------------------------------------------------------------------------
# ensembles

ENSEMBLE_SLOT = "{c}"


def load_ensemble(path: str | Path) -> list[str]:
    outers = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(outers, list) or not all(isinstance(s, str) for s in outers):
        raise TemplateError(f"ensemble file {path} must be a JSON array of strings")
    for outer in outers:
        if outer.count(ENSEMBLE_SLOT) != 1:
            raise TemplateError(f"ensemble template must contain exactly one {ENSEMBLE_SLOT}: {outer!r}")
    return outers


def builtin_ensemble() -> list[str]:
    """The 80-outer-template ensemble shipped as package data."""
    return load_ensemble(Path(__file__).parent / "data" / "ensemble_80.json")


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class Prompt:
    text: str
    assignment: tuple[tuple[str, str], ...]
    template_index: int
    ensemble_index: int | None = None

    def assignment_dict(self) -> dict[str, str]:
        return dict(self.assignment)


@dataclass
class PromptSet:
    prompts: list[Prompt]
    schema: AttributeSchema

    def __len__(self) -> int:
        return len(self.prompts)

    def texts(self) -> list[str]:
        return [p.text for p in self.prompts]

    def label_of(self, i: int) -> int | None:
        assignment = self.prompts[i].assignment_dict()
        value = assignment.get(self.schema.class_family)
        if value is None:
            return None
        return self.schema.value_to_label()[value]

    def labels(self) -> list[int | None]:
        return [self.label_of(i) for i in range(len(self.prompts))]


def generate(
    schema: AttributeSchema,
    fixed: Mapping[str, str],
    marginalized: Iterable[str],
    templates: Sequence[Template],
    ensemble: Sequence[str] | None = None,
    max_ensemble: int | None = None,
) -> PromptSet:
    """Cross product of marginalized family values × templates × ensemble.

    Families in neither ``fixed`` nor ``marginalized`` are absent: their
    optional blocks drop. Output order is the lexicographic order of
    (template index, family order, value order, ensemble index), so
    regeneration is byte-identical.
    """
    schema.validate()
    marg = list(dict.fromkeys(marginalized))
    overlap = set(fixed) & set(marg)
    if overlap:
        raise SchemaError(f"families both fixed and marginalized: {sorted(overlap)}")
    known = set(schema.family_names())
    for name in list(fixed) + marg:
        if name not in known:
            raise SchemaError(f"unknown family {name!r}")
    for name, value in fixed.items():
        if value not in schema.family_values(name):
            raise SchemaError(f"fixed value {value!r} not in family {name!r}")

    outers = list(ensemble) if ensemble else None
    if outers is not None and max_ensemble is not None:
        outers = outers[:max_ensemble]

    marg_in_order = [name for name in schema.family_names() if name in marg]
    value_lists = [schema.family_values(name) for name in marg_in_order]

    prompts: list[Prompt] = []
    for t_idx, template in enumerate(templates):
        for combo in itertools.product(*value_lists):
            assignment = dict(fixed)
            assignment.update(zip(marg_in_order, combo))
            core = render(template, assignment)
            key = tuple(
                (name, assignment[name]) for name in schema.family_names() if name in assignment
            )
            if outers is None:
                prompts.append(Prompt(text=core, assignment=key, template_index=t_idx))
            else:
                for e_idx, outer in enumerate(outers):
                    prompts.append(
                        Prompt(
                            text=outer.replace(ENSEMBLE_SLOT, core),
                            assignment=key,
                            template_index=t_idx,
                            ensemble_index=e_idx,
                        )
                    )
    return PromptSet(prompts=prompts, schema=schema)


def manifest_prompts(
    schema: AttributeSchema,
    templates: Sequence[Template],
    ensemble: Sequence[str] | None = None,
    max_ensemble: int | None = None,
) -> list[str]:
    """Every prompt any slice/coalition over the schema can generate.

    Covers, for each subset of non-class families (class family always
    marginalized), the full value cross product; deduplicated preserving
    first occurrence. This is the manifest an embedding adapter must cover
    so that prompt lookups never miss.
    """
    others = [name for name in schema.family_names() if name != schema.class_family]
    seen: dict[str, None] = {}
    for r in range(len(others) + 1):
        for subset in itertools.combinations(others, r):
            ps = generate(
                schema,
                fixed={},
                marginalized=[schema.class_family, *subset],
                templates=templates,
                ensemble=ensemble,
                max_ensemble=max_ensemble,
            )
            for text in ps.texts():
                seen.setdefault(text, None)
    return list(seen)
