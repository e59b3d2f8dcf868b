import json

import pytest

from xdiag.prompts import (
    AttributeSchema,
    SchemaError,
    TemplateError,
    builtin_ensemble,
    generate,
    load_ensemble,
    load_schema,
    manifest_prompts,
    parse_template,
    render,
)

BIRD_SCHEMA = AttributeSchema(
    families=(
        ("species", ("sparrow", "gull", "heron")),
        ("place", ("forest", "ocean", "lake", "bamboo")),
    ),
    class_family="species",
    class_values=("landbird", "waterbird"),
    class_value_to_label={"sparrow": 0, "gull": 1, "heron": 1},
)


def big_species_schema(n_species=200, n_places=4):
    return AttributeSchema(
        families=(
            ("species", tuple(f"species{i}" for i in range(n_species))),
            ("place", tuple(f"place{i}" for i in range(n_places))),
        ),
        class_family="species",
        class_values=("landbird", "waterbird"),
        class_value_to_label={f"species{i}": i % 2 for i in range(n_species)},
    )


# ---------------------------------------------------------------------------
# parsing


def test_parse_optional_block_structure():
    t = parse_template("a photo of a {species}[ in the {place}].")
    kinds = [s.kind for s in t.segments]
    assert kinds == ["literal", "placeholder", "optional", "literal"]
    assert t.mandatory_families() == ("species",)
    assert t.families() == ("species", "place")


def test_parse_duplicate_family_rejected():
    with pytest.raises(TemplateError, match="duplicate family"):
        parse_template("{a}{a}")
    with pytest.raises(TemplateError, match="duplicate family"):
        parse_template("{a}[ and {a}]")


def test_parse_optional_without_placeholder_rejected():
    with pytest.raises(TemplateError, match="no placeholder"):
        parse_template("[no placeholder]")


def test_parse_optional_with_two_placeholders_rejected():
    with pytest.raises(TemplateError, match="more than one"):
        parse_template("[{a} {b}]")


def test_parse_unbalanced_brackets():
    for bad in ("{a", "a}", "[x {a}", "x]", "[{a}"):
        with pytest.raises(TemplateError, match="unbalanced"):
            parse_template(bad)


def test_parse_unknown_escape():
    with pytest.raises(TemplateError, match="unknown escape"):
        parse_template(r"\n")


def test_parse_escapes_are_literals():
    t = parse_template(r"literal \{braces\} and \[brackets\]")
    assert render(t, {}) == "literal {braces} and [brackets]"


def test_parse_nested_optional_rejected():
    with pytest.raises(TemplateError, match="nest"):
        parse_template("[a [b {c}]]")


# ---------------------------------------------------------------------------
# rendering


def test_render_substitution_and_optional_drop():
    t = parse_template("a photo of a {species}[ in the {place}].")
    assert render(t, {"species": "sparrow", "place": "forest"}) == "a photo of a sparrow in the forest."
    assert render(t, {"species": "sparrow"}) == "a photo of a sparrow."


def test_render_missing_mandatory_family():
    t = parse_template("a photo of a {species}.")
    with pytest.raises(TemplateError, match="species"):
        render(t, {})


def test_render_fairface_pattern():
    t = parse_template("a photo of a {race} {age adjective} {gender}.")
    out = render(t, {"race": "Black", "age adjective": "young", "gender": "female"})
    assert out == "a photo of a Black young female."


# ---------------------------------------------------------------------------
# generation


def test_generate_full_product_800():
    schema = big_species_schema()
    t = parse_template("a photo of a {species}[ in the {place}].")
    ps = generate(schema, {}, ["species", "place"], [t])
    assert len(ps) == 200 * 4


def test_generate_fixed_place():
    schema = big_species_schema()
    t = parse_template("a photo of a {species}[ in the {place}].")
    ps = generate(schema, {"place": "place1"}, ["species"], [t])
    assert len(ps) == 200
    assert all(p.assignment_dict()["place"] == "place1" for p in ps.prompts)


def test_generate_ensemble_multiplies_by_80():
    schema = big_species_schema(n_species=5)
    t = parse_template("a photo of a {species}[ in the {place}].")
    ens = builtin_ensemble()
    assert len(ens) == 80
    ps = generate(schema, {}, ["species"], [t], ensemble=ens)
    assert len(ps) == 5 * 80
    assert ps.prompts[0].text.startswith("a bad photo of a ")


def test_generate_count_identity():
    schema = BIRD_SCHEMA
    t1 = parse_template("{species}[, {place}].")
    t2 = parse_template("a photo of a {species}[ in the {place}].")
    ens = builtin_ensemble()[:7]
    ps = generate(schema, {}, ["species", "place"], [t1, t2], ensemble=ens, max_ensemble=3)
    assert len(ps) == 3 * 4 * 2 * 3  # species × place × templates × capped ensemble


def test_generate_deterministic_order():
    schema = BIRD_SCHEMA
    t = parse_template("a photo of a {species}[ in the {place}].")
    a = generate(schema, {}, ["species", "place"], [t], ensemble=builtin_ensemble(), max_ensemble=2)
    b = generate(schema, {}, ["species", "place"], [t], ensemble=builtin_ensemble(), max_ensemble=2)
    assert a.texts() == b.texts()
    assert [p.assignment for p in a.prompts] == [p.assignment for p in b.prompts]
    # lexicographic in (template, family order, value order, ensemble)
    assert a.prompts[0].assignment_dict() == {"species": "sparrow", "place": "forest"}
    assert a.prompts[0].ensemble_index == 0
    assert a.prompts[1].ensemble_index == 1
    assert a.prompts[2].assignment_dict() == {"species": "sparrow", "place": "ocean"}


def test_generate_labels_derivable():
    schema = BIRD_SCHEMA
    t = parse_template("a photo of a {species}[ in the {place}].")
    ps = generate(schema, {"place": "ocean"}, ["species"], [t])
    assert ps.labels() == [0, 1, 1]
    t_opt = parse_template("a photo[ of a {species}][ in the {place}].")
    unlabeled = generate(schema, {"place": "ocean"}, [], [t_opt])
    assert unlabeled.labels() == [None]


def test_generate_rejects_bad_fixed_value():
    t = parse_template("a photo of a {species}[ in the {place}].")
    with pytest.raises(SchemaError, match="not in family"):
        generate(BIRD_SCHEMA, {"place": "mars"}, ["species"], [t])


def test_generate_rejects_overlap():
    t = parse_template("a photo of a {species}[ in the {place}].")
    with pytest.raises(SchemaError, match="both fixed and marginalized"):
        generate(BIRD_SCHEMA, {"place": "ocean"}, ["species", "place"], [t])


def test_render_injective_over_assignments():
    schema = BIRD_SCHEMA
    t = parse_template("a photo of a {species}[ in the {place}].")
    rendered = set()
    count = 0
    for include_place in (False, True):
        for species in schema.family_values("species"):
            places = schema.family_values("place") if include_place else (None,)
            for place in places:
                assignment = {"species": species}
                if place is not None:
                    assignment["place"] = place
                rendered.add(render(t, assignment))
                count += 1
    assert len(rendered) == count


# ---------------------------------------------------------------------------
# files


def test_schema_file_round_trip(tmp_path):
    path = tmp_path / "schema.json"
    path.write_text(json.dumps(BIRD_SCHEMA.to_json_dict()))
    back = load_schema(path)
    assert back == BIRD_SCHEMA
    assert back.value_to_label()["heron"] == 1


def test_schema_identity_class_values(tmp_path):
    obj = {
        "families": [{"name": "shape", "values": ["triangle", "square"]}],
        "class_family": "shape",
        "class_values": ["triangle", "square"],
    }
    path = tmp_path / "schema.json"
    path.write_text(json.dumps(obj))
    schema = load_schema(path)
    assert schema.value_to_label() == {"triangle": 0, "square": 1}


def test_schema_validation_errors():
    with pytest.raises(SchemaError, match="unique"):
        AttributeSchema(
            families=(("a", ("x",)), ("a", ("y",))), class_family="a", class_values=("x",)
        ).validate()
    with pytest.raises(SchemaError, match="not among"):
        AttributeSchema(families=(("a", ("x",)),), class_family="b", class_values=("x",)).validate()
    with pytest.raises(SchemaError, match="covered"):
        AttributeSchema(
            families=(("a", ("x", "y")),),
            class_family="a",
            class_values=("c0", "c1"),
            class_value_to_label={"x": 0, "y": 0},
        ).validate()


def test_ensemble_file_validation(tmp_path):
    path = tmp_path / "ens.json"
    path.write_text(json.dumps(["a photo of a {c}.", "no slot"]))
    with pytest.raises(TemplateError, match="exactly one"):
        load_ensemble(path)


def test_manifest_covers_all_subsets():
    schema = BIRD_SCHEMA
    t = parse_template("a photo of a {species}[ in the {place}].")
    manifest = set(manifest_prompts(schema, [t]))
    # class-only prompts (place absent) and full-product prompts all present
    for species in schema.family_values("species"):
        assert f"a photo of a {species}." in manifest
        for place in schema.family_values("place"):
            assert f"a photo of a {species} in the {place}." in manifest
    assert len(manifest) == 3 + 3 * 4
