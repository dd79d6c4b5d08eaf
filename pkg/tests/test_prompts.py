import json

import pytest

from urm import prompts as pb


def test_fill_single():
    assert pb.fill_templates("apple", "A photo of a {}.") == ["A photo of a apple."]


def test_fill_cardinality():
    assert len(pb.fill_templates("apple", ["t1 {}", "t2 {}"])) == 2


def test_template_without_placeholder():
    with pytest.raises(pb.PromptError, match="no placeholder"):
        pb.fill_templates("apple", ["no placeholder"])


def test_default_templates_valid():
    for t in pb.DEFAULT_TEMPLATES + pb.LLM_QUERIES:
        assert t.count("{}") == 1


def test_cached_response_deterministic(tmp_path):
    path = tmp_path / "cache.json"
    path.write_text(json.dumps({"apple": {"Describe what a apple looks like?": "A round red fruit."}}))
    for _ in range(2):
        out = pb.llm_prompts("apple", ["Describe what a {} looks like?"], cache=pb.PromptCache(path))
        assert out == ["A round red fruit."]


def test_category_free_query():
    q = pb.query_text("apple", "Describe what a {} looks like?", category_free=True)
    assert q == "Describe what the category of the most numerous objects in the image looks like?"


def test_offline_empty_cache_lists_missing(tmp_path):
    with pytest.raises(pb.MissingPromptError) as err:
        pb.llm_prompts("apple", pb.LLM_QUERIES[:2], cache=pb.PromptCache(tmp_path / "none.json"))
    assert len(err.value.missing) == 2
    assert "How can you identify a apple?" in str(err.value)


def test_live_results_persisted(tmp_path):
    path = tmp_path / "c.json"
    client = pb.TemplateClient({"apple": "Red and round."})
    pb.llm_prompts("apple", pb.LLM_QUERIES[:1], client=client, cache=pb.PromptCache(path))
    assert json.loads(path.read_text()) == {"apple": {"Describe what a apple looks like?": "Red and round."}}


def test_failing_client_falls_back_to_cache(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"pear": {"How can you identify a pear?": "Green teardrop."}}))
    out = pb.llm_prompts("pear", ["How can you identify a {}?"], client=pb.OfflineClient(), cache=pb.PromptCache(path))
    assert out == ["Green teardrop."]


def test_prompt_set_size_and_env_cache(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    monkeypatch.setenv(pb.PROMPT_CACHE_ENV, str(path))
    client = pb.TemplateClient({"apple": "Red and round."})
    ps = pb.build_prompt_set("apple", client=client)
    assert len(ps.prompts) == len(pb.DEFAULT_TEMPLATES) + len(pb.LLM_QUERIES)
    assert path.exists()
    again = pb.build_prompt_set("apple")  # served from the env-named cache, offline
    assert again == ps


def test_prompt_set_rejects_placeholder():
    with pytest.raises(pb.PromptError):
        pb.PromptSet("x", ("still {} here",))
    with pytest.raises(pb.PromptError):
        pb.PromptSet("x", ())
