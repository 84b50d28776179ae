import httpx
import pytest
from hypothesis import given, strategies as st

from sdoh_extract.corpus import ClinicalNote
from sdoh_extract.extraction import (
    AuthenticationError,
    BackendConfig,
    BackendError,
    ExtractionRecord,
    HTTPChatBackend,
    MockBackend,
    RawExtraction,
    TransientBackendError,
    TransportError,
    UnparseableReplyError,
    build_prompt,
    extract,
    format_record,
    parse_output,
    run_extraction,
)

LABELS = ("Age:", "Gender:", "Ethnicity:", "Social History:", "Family History:")


class FlakyBackend:
    def __init__(self, failures, reply="Age: 1", error=TransientBackendError):
        self.failures = failures
        self.reply = reply
        self.error = error
        self.calls = 0

    def complete(self, request):
        self.calls += 1
        if self.calls <= self.failures:
            raise self.error("boom", 503)
        return self.reply


def no_sleep(_):
    pass


def test_user_message_is_note_text():
    req = build_prompt(ClinicalNote("n", "76 year old white woman"), "m")
    assert req.user_message == "76 year old white woman"


def test_system_message_names_each_label_once():
    req = build_prompt(ClinicalNote("n", "text"), "m")
    for label in LABELS:
        assert req.system_message.count(label) == 1
    assert "annotator" in req.system_message
    assert "N/A" in req.system_message


def test_build_prompt_deterministic():
    note = ClinicalNote("n", "text")
    assert build_prompt(note, "m") == build_prompt(note, "m")
    assert build_prompt(note, "m").temperature == 0.0


def test_payload_shape():
    payload = build_prompt(ClinicalNote("n", "text"), "m", temperature=0.5).payload()
    assert payload["model"] == "m"
    assert payload["temperature"] == 0.5
    assert [m["role"] for m in payload["messages"]] == ["system", "user"]
    assert "note_id" not in payload


def test_temperature_bounds():
    with pytest.raises(ValueError):
        build_prompt(ClinicalNote("n", "t"), "m", temperature=2.5)


def test_backend_config_bounds():
    with pytest.raises(ValueError):
        BackendConfig(max_retries=11)
    with pytest.raises(ValueError):
        BackendConfig(timeout=0)


def test_extract_canned_reply():
    backend = MockBackend({"n": "R"})
    raw = extract(build_prompt(ClinicalNote("n", "t"), "m"), backend)
    assert (raw.raw_text, raw.attempt_count) == ("R", 1)


def test_extract_retries_then_succeeds():
    backend = FlakyBackend(failures=2)
    delays = []
    raw = extract(build_prompt(ClinicalNote("n", "t"), "m"), backend, max_retries=3,
                  backoff_base=0.5, sleep=delays.append)
    assert raw.attempt_count == 3
    assert delays == [0.5, 1.0]


def test_extract_exhausts_retries():
    backend = FlakyBackend(failures=100)
    with pytest.raises(TransportError) as err:
        extract(build_prompt(ClinicalNote("n", "t"), "m"), backend, max_retries=2, sleep=no_sleep)
    assert backend.calls == 3
    assert err.value.attempts == 3
    assert err.value.status == 503


def test_auth_failure_not_retried():
    backend = FlakyBackend(failures=100, error=AuthenticationError)
    with pytest.raises(AuthenticationError):
        extract(build_prompt(ClinicalNote("n", "t"), "m"), backend, max_retries=5, sleep=no_sleep)
    assert backend.calls == 1


def test_mock_falls_back_to_text_key():
    backend = MockBackend({"76 year old white woman": "Age: 76 year old"})
    raw = extract(build_prompt(ClinicalNote("x", "76 year old white woman"), "m"), backend)
    assert raw.raw_text == "Age: 76 year old"


# -- HTTP backend against an in-process transport ----------------------------


def _http_backend(handler, monkeypatch, key="sk-test"):
    if key is None:
        monkeypatch.delenv("LLM_API_KEY", raising=False)
    else:
        monkeypatch.setenv("LLM_API_KEY", key)
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return HTTPChatBackend(BackendConfig(endpoint_url="http://llm.test/v1/chat/completions"), client=client)


def test_http_backend_success(monkeypatch):
    seen = {}

    def handler(request):
        seen["auth"] = request.headers["authorization"]
        seen["body"] = request.read()
        return httpx.Response(200, json={"choices": [{"message": {"content": "Age: 5"}}]})

    backend = _http_backend(handler, monkeypatch)
    assert backend.complete(build_prompt(ClinicalNote("n", "t"), "m")) == "Age: 5"
    assert seen["auth"] == "Bearer sk-test"
    assert b'"role": "system"' in seen["body"] or b'"role":"system"' in seen["body"]


@pytest.mark.parametrize("status, error", [(401, AuthenticationError), (429, TransientBackendError),
                                           (503, TransientBackendError), (400, BackendError)])
def test_http_backend_status_mapping(monkeypatch, status, error):
    backend = _http_backend(lambda r: httpx.Response(status, text="nope"), monkeypatch)
    with pytest.raises(error) as err:
        backend.complete(build_prompt(ClinicalNote("n", "t"), "m"))
    assert type(err.value) is error


def test_http_backend_missing_key(monkeypatch):
    backend = _http_backend(lambda r: httpx.Response(200), monkeypatch, key=None)
    with pytest.raises(AuthenticationError, match="LLM_API_KEY"):
        backend.complete(build_prompt(ClinicalNote("n", "t"), "m"))


# -- parsing ------------------------------------------------------------------


def parse(text, note_id="n"):
    return parse_output(RawExtraction(note_id, text))


def test_parse_demographics_reply():
    rec = parse("Age: 76 year old\nGender: female\nEthnicity: White\nSocial History: N/A\nFamily History: N/A")
    assert rec == ExtractionRecord("n", age="76 year old", gender="female", ethnicity="White")


def test_parse_unstructured_reply():
    with pytest.raises(UnparseableReplyError):
        parse("no structured content here")


def test_parse_single_label():
    rec = parse("Family History: father had heart disease and died")
    assert rec == ExtractionRecord("n", family_history="father had heart disease and died")


def test_parse_lenient_variants():
    reply = (
        "Sure! Here is what I found.\n\n"
        "- **Age:** 54\n"
        "GENDER : none\n"
        "social history: smokes 1 ppd,\n  drinks socially\n"
        "Family_History: n/a.\n"
        "\nLet me know if you need anything else."
    )
    rec = parse(reply)
    assert rec.age == "54"
    assert rec.gender is None
    assert rec.social_history == "smokes 1 ppd,\n  drinks socially"
    assert rec.family_history is None
    assert rec.ignored_lines == 2


def test_parse_repeated_label_keeps_first():
    rec = parse("Age: 40\nAge: 41")
    assert rec.age == "40"
    assert rec.ignored_lines == 1


field_value = st.one_of(
    st.none(),
    st.text(alphabet=st.characters(blacklist_categories=("Cs", "Cc", "Zl", "Zp")), min_size=1, max_size=30)
    .map(str.strip)
    .filter(lambda s: s and s.rstrip(".").strip().lower() not in ("", "n/a", "none")),
)


@given(field_value, field_value, field_value, field_value, field_value)
def test_parse_round_trip(age, gender, ethnicity, social, family):
    rec = ExtractionRecord("n", age, gender, ethnicity, social, family)
    assert parse(format_record(rec)) == rec


@given(st.text(max_size=200))
def test_parse_never_invents_text(reply):
    try:
        rec = parse(reply)
    except UnparseableReplyError:
        return
    for name in ("age", "gender", "ethnicity", "social_history", "family_history"):
        value = getattr(rec, name)
        if value is not None:
            assert value in reply


# -- corpus driver -------------------------------------------------------------


def test_run_extraction_records_failures():
    notes = [ClinicalNote(f"n{i}", f"text {i}") for i in range(3)]
    backend = MockBackend({"n0": "Age: 1", "n1": "nothing useful", "n2": "Gender: male"})
    outcomes = run_extraction(notes, backend, parallel=1)
    assert [o.ok for o in outcomes] == [True, False, True]
    assert "UnparseableReplyError" in outcomes[1].error


def test_run_extraction_parallel_matches_serial():
    notes = [ClinicalNote(f"n{i}", f"text {i}") for i in range(10)]
    backend = MockBackend({f"n{i}": f"Age: {i}\nGender: N/A" for i in range(10)})
    serial = run_extraction(notes, backend, parallel=1)
    parallel = run_extraction(notes, backend, parallel=4)
    assert [o.record for o in serial] == [o.record for o in parallel]


def test_run_extraction_auth_aborts():
    notes = [ClinicalNote(f"n{i}", "t") for i in range(5)]
    with pytest.raises(AuthenticationError):
        run_extraction(notes, FlakyBackend(100, error=AuthenticationError), parallel=2, sleep=no_sleep)
