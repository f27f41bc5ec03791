"""
ontology_rdf モジュールのテスト
"""
import numpy as np
import pytest

from conftest import SAMPLE_RDF
from dataset import Dataset, EmployeeRecord, PartitionSpec, generate_synthetic, partition_vertical
from ontology_rdf import (DEFAULT_NAMESPACE, DisguisePolicy, InferenceError, OntologyModel, RdfGenerationError,
                          RdfParseError, category_extrema, check_subject_base, extract_bounds, format_amount,
                          generate_rdf, infer_unknown_sum, inline_location, location_for, parse_rdf_xml,
                          read_rdf_location, serialize_rdf_xml, write_rdf)

SAMPLE_ATTRS = ["Basic", "HRA", "flat", "Travel"]


def _doc_for(view, df=10.0):
    return generate_rdf(view, OntologyModel.for_schema(view.attributes), DisguisePolicy(df))


def test_sample_rdf_literals():
    doc = parse_rdf_xml(SAMPLE_RDF)
    subject = "http://www.SkumarSolutions.com/ID10"
    assert doc.subjects == [subject]
    literals = doc.literals(subject)
    assert literals["hasMaxBasic"] == "30"
    assert literals["hasMaxHRA"] == "42"
    assert literals["hasMaxflat"] == "45"
    assert literals["hasMaxTravel"] == "55"
    assert literals["hasName"] == "reva123"
    # n.0 の誤記も j.0 として読む
    assert literals["hasMinHRA"] == "30"
    assert all(t.predicate.startswith(DEFAULT_NAMESPACE) for t in doc.triples)


def test_sample_rdf_unknown_sum():
    doc = parse_rdf_xml(SAMPLE_RDF)
    assert doc.subject_for(10) == "http://www.SkumarSolutions.com/ID10"
    assert infer_unknown_sum(doc, 10, SAMPLE_ATTRS) == 172.0


def test_generate_rdf_t2_alice(t2, t2_spec):
    view_a, _ = partition_vertical(t2, t2_spec)
    doc = _doc_for(view_a)
    first = doc.subjects[0]
    assert first == "http://www.SkumarSolutions.com/ID1"
    assert [t.local_name for t in doc.description(first)] == [
        "hasMaxBasic", "hasMinBasic", "hasMaxHRA", "hasMinHRA", "hasName"]
    assert doc.literals(first) == {
        "hasMaxBasic": "210", "hasMinBasic": "110",
        "hasMaxHRA": "90", "hasMinHRA": "60",
        "hasName": "reva123",
    }
    assert doc.literals(doc.subjects[1])["hasMaxBasic"] == "210"


def test_generate_rdf_never_emits_raw_values(t2, t2_spec):
    view_a, view_b = partition_vertical(t2, t2_spec)
    for view in (view_a, view_b):
        doc = _doc_for(view)
        raw = {format_amount(v) for r in view.records for v in r.attributes.values()}
        literals = {t.object for t in doc.triples if t.local_name != "hasName"}
        assert not raw & literals


def test_serialize_layout(t2, t2_spec):
    view_a, _ = partition_vertical(t2, t2_spec)
    text = serialize_rdf_xml(_doc_for(view_a)).decode("utf-8")
    assert text.startswith('<?xml version="1.0" encoding="UTF-8"?>\n<rdf:RDF')
    assert 'xmlns:j.0="http://www.ppgd.com/"' in text
    assert '<rdf:Description rdf:about="http://www.SkumarSolutions.com/ID2">' in text
    assert "    <j.0:hasMaxBasic>210</j.0:hasMaxBasic>\n" in text
    assert text.endswith("</rdf:RDF>\n")


def test_round_trip_random_datasets():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        ds = generate_synthetic(int(rng.integers(0, 2**31)), int(rng.integers(1, 30)))
        view_a, view_b = partition_vertical(ds, PartitionSpec.default_split())
        df = float(rng.choice([0.0, 5.0, 10.0, 2.5]))
        for view in (view_a, view_b):
            doc = _doc_for(view, df)
            data = serialize_rdf_xml(doc)
            parsed = parse_rdf_xml(data)
            assert parsed == doc
            assert serialize_rdf_xml(parsed) == data


def test_serialized_document_is_valid_rdf(t2, t2_spec):
    rdflib = pytest.importorskip("rdflib")
    view_a, _ = partition_vertical(t2, t2_spec)
    doc = _doc_for(view_a)
    graph = rdflib.Graph()
    graph.parse(data=serialize_rdf_xml(doc).decode("utf-8"), format="xml")
    assert {(str(s), str(p), str(o)) for s, p, o in graph} == {
        (t.subject, t.predicate, t.object) for t in doc.triples}


def test_escaping_of_names():
    ds = Dataset(("Basic", "PF"), (EmployeeRecord(1, "a<b & \"c\"", "TL", {"Basic": 1.0, "PF": 2.0}),))
    view_a, _ = partition_vertical(ds, PartitionSpec.from_names(["Basic"], ["PF"]))
    doc = _doc_for(view_a)
    assert parse_rdf_xml(serialize_rdf_xml(doc)).literals(doc.subjects[0])["hasName"] == 'a<b & "c"'


def test_parse_errors_report_position():
    with pytest.raises(RdfParseError, match="line"):
        parse_rdf_xml(SAMPLE_RDF.replace(b"</rdf:Description>", b""))


def test_parse_rejects_non_numeric_bound():
    with pytest.raises(RdfParseError, match="hasMaxBasic"):
        parse_rdf_xml(SAMPLE_RDF.replace(b">30</j.0:hasMaxBasic>", b">thirty</j.0:hasMaxBasic>"))


def test_parse_rejects_wrong_root():
    with pytest.raises(RdfParseError):
        parse_rdf_xml(b"<root/>")


def test_inference_errors():
    doc = parse_rdf_xml(SAMPLE_RDF)
    with pytest.raises(InferenceError):
        infer_unknown_sum(doc, 11, ["Basic"])
    with pytest.raises(InferenceError):
        infer_unknown_sum(doc, 10, ["PF"])
    assert infer_unknown_sum(doc, 11, []) == 0.0


def test_extract_bounds():
    doc = parse_rdf_xml(SAMPLE_RDF)
    assert extract_bounds(doc, 10, ["Basic", "Travel"]) == {"Basic": (30.0, 20.0), "Travel": (55.0, 38.0)}


def test_category_extrema_per_category():
    ds = Dataset(("Basic", "PF"), (
        EmployeeRecord(1, "a", "TeamLead", {"Basic": 10.0, "PF": 1.0}),
        EmployeeRecord(2, "b", "TeamLead", {"Basic": 30.0, "PF": 3.0}),
        EmployeeRecord(3, "c", "ProjectManager", {"Basic": 50.0, "PF": 5.0}),
    ))
    view_a, _ = partition_vertical(ds, PartitionSpec.from_names(["Basic"], ["PF"]))
    table = category_extrema(view_a)
    assert table.max("TeamLead", "Basic") == 30.0
    assert table.min("TeamLead", "Basic") == 10.0
    assert table["ProjectManager", "Basic"] == (50.0, 50.0)
    assert len(table) == 2


def test_ontology_rejects_unknown_attribute():
    ont = OntologyModel.for_schema(["Basic"])
    assert ont.relation_for("Basic", "max") == DEFAULT_NAMESPACE + "hasMaxBasic"
    assert "hasData" in ont.relations
    with pytest.raises(RdfGenerationError):
        ont.relation_for("PF", "max")


def test_subject_base_must_not_end_in_digit(t2, t2_spec):
    view_a, _ = partition_vertical(t2, t2_spec)
    ont = OntologyModel.for_schema(view_a.attributes)
    # "E1" + "1" と "E" + "11" は同じ URI になる
    with pytest.raises(RdfGenerationError):
        generate_rdf(view_a, ont, DisguisePolicy(10.0), "http://example.org/E1")
    with pytest.raises(RdfGenerationError):
        check_subject_base("")

    doc = generate_rdf(view_a, ont, DisguisePolicy(10.0), "http://example.org/emp-")
    assert doc.subject_for(1) == "http://example.org/emp-1"
    assert doc.subject_for(2) == "http://example.org/emp-2"
    assert doc.subject_for(11) is None


def test_disguise_policy_must_be_non_negative():
    with pytest.raises(RdfGenerationError):
        DisguisePolicy(-1.0)


def test_format_amount():
    assert format_amount(30.0) == "30"
    assert format_amount(37.41) == "37.41"
    assert float(format_amount(0.1 + 0.2)) == 0.1 + 0.2


def test_read_rdf_locations(tmp_path, t2, t2_spec):
    view_a, _ = partition_vertical(t2, t2_spec)
    doc = _doc_for(view_a)
    path = write_rdf(doc, tmp_path / "RDF_A.rdf")
    data = path.read_bytes()
    assert read_rdf_location(str(path)) == data
    assert read_rdf_location(location_for(path)) == data
    assert read_rdf_location(inline_location(data)) == data
    with pytest.raises(RdfParseError):
        read_rdf_location(str(tmp_path / "missing.rdf"))
