import json

import pytest

from steptree import GRPO, LAMBDA
from steptree.io import (
    RecordError,
    effective_config,
    group_to_record,
    iter_groups,
    parse_group_record,
    serialize_group,
    weight_record,
)
from steptree.verify import GenParams, LOGP_RANDOM_CONSISTENT, generate_random_group

from conftest import make_overlap_group


class TestRoundTrip:
    def test_overlap_with_logps(self):
        group = make_overlap_group(with_logps=True, step=12)
        line = serialize_group(group)
        assert "\n" not in line
        back = next(iter(iter_groups([line])))
        assert back == group

    def test_random_groups_lossless(self):
        params = GenParams(
            seed=51, fork_bias=0.6, reward_dist="uniform", logp_mode=LOGP_RANDOM_CONSISTENT
        )
        for index in range(200):
            group = generate_random_group(params, index)
            assert next(iter(iter_groups([serialize_group(group)]))) == group

    def test_serialization_deterministic(self):
        group = make_overlap_group(with_logps=True)
        assert serialize_group(group) == serialize_group(group)

    def test_full_precision_floats(self):
        group = make_overlap_group(with_logps=True)
        record = json.loads(serialize_group(group))
        assert record["completions"][0]["logp"][0] == group.trajectories[0].logp_new[0]


class TestParsing:
    def test_line_numbers_in_errors(self):
        lines = [
            serialize_group(make_overlap_group()),
            '{"query_id": "bad", "completions": [{"tokens": [1], "reward": 0.0, "logp": [-0.1, -0.2]}, {"tokens": [2], "reward": 1.0}]}',
        ]
        with pytest.raises(RecordError, match="line 2"):
            list(iter_groups(lines))

    def test_malformed_json(self):
        with pytest.raises(RecordError, match="line 1"):
            list(iter_groups(["{not json"]))

    def test_nan_rejected(self):
        line = '{"query_id": "x", "completions": [{"tokens": [1], "reward": NaN}, {"tokens": [2], "reward": 0.0}]}'
        with pytest.raises(RecordError, match="line 1"):
            list(iter_groups([line]))

    def test_infinity_rejected(self):
        line = '{"query_id": "x", "completions": [{"tokens": [1], "reward": Infinity}, {"tokens": [2], "reward": 0.0}]}'
        with pytest.raises(RecordError):
            list(iter_groups([line]))

    def test_empty_input(self):
        assert list(iter_groups([])) == []
        assert list(iter_groups(["", "   ", "\n"])) == []

    def test_lenient_mode_skips_and_counts(self):
        good = serialize_group(make_overlap_group())
        errors: list[RecordError] = []
        groups = list(iter_groups([good, "oops", good], strict=False, errors=errors))
        assert len(groups) == 2
        assert len(errors) == 1
        assert errors[0].line_no == 2

    def test_single_completion_rejected(self):
        line = '{"query_id": "x", "completions": [{"tokens": [1], "reward": 0.0}]}'
        with pytest.raises(RecordError, match="two"):
            list(iter_groups([line]))

    def test_missing_query_id(self):
        with pytest.raises(ValueError, match="query_id"):
            parse_group_record({"completions": []})

    def test_unknown_completion_key(self):
        record = {
            "query_id": "x",
            "completions": [
                {"tokens": [1], "reward": 0.0, "logprobs": [-0.1]},
                {"tokens": [2], "reward": 1.0},
            ],
        }
        with pytest.raises(ValueError, match="unknown keys"):
            parse_group_record(record)

    def test_boolean_reward_rejected(self):
        record = {
            "query_id": "x",
            "completions": [
                {"tokens": [1], "reward": True},
                {"tokens": [2], "reward": 1.0},
            ],
        }
        with pytest.raises(ValueError, match="number"):
            parse_group_record(record)

    def test_float_token_rejected(self):
        record = {
            "query_id": "x",
            "completions": [
                {"tokens": [1.5], "reward": 0.0},
                {"tokens": [2], "reward": 1.0},
            ],
        }
        with pytest.raises(ValueError, match="integers"):
            parse_group_record(record)

    def test_step_round_trips(self):
        group = make_overlap_group(step=44)
        assert group_to_record(group)["step"] == 44
        back = next(iter(iter_groups([serialize_group(group)])))
        assert back.step == 44


class TestWeightRecords:
    def test_structure(self):
        group = make_overlap_group()
        record = weight_record(group, LAMBDA)
        assert record["query_id"] == "overlap"
        assert record["objective"] == LAMBDA
        assert len(record["completions"]) == group.k
        for i, completion in enumerate(record["completions"]):
            n = len(group.trajectories[i])
            assert len(completion["token_advantage"]) == n
            assert len(completion["lambda_weight"]) == n

    def test_values(self):
        group = make_overlap_group()
        record = weight_record(group, GRPO)
        assert record["completions"][2]["lambda_weight"][0] == pytest.approx(1.0 / 3.0)
        assert record["completions"][0]["lambda_weight"][3] == 1.0
        assert record["completions"][2]["advantage"] == pytest.approx(
            1.5498260496951666, abs=1e-15
        )
        assert record["objective_value"] == pytest.approx(-0.13023748316766112, abs=1e-12)
        assert record["loss"] == -record["objective_value"]

    def test_lambda_objective_value(self):
        record = weight_record(make_overlap_group(), LAMBDA)
        assert record["objective_value"] == pytest.approx(-0.032559370791915315, abs=1e-12)

    def test_token_advantage_matches_step_structure(self):
        group = make_overlap_group()
        record = weight_record(group, GRPO)
        shared = record["completions"][2]["token_advantage"][0]
        assert shared == pytest.approx(-0.22140372138502393, abs=1e-15)
        assert record["completions"][3]["token_advantage"][0] == shared

    def test_rejects_unknown_objective(self):
        with pytest.raises(ValueError):
            weight_record(make_overlap_group(), "prm")


class TestEffectiveConfig:
    def test_bare_dump_downgrades(self):
        config = effective_config(make_overlap_group(), beta=0.04)
        assert config.beta == 0.0
        assert config.assume_unit_ratio

    def test_full_dump_keeps_beta(self):
        config = effective_config(make_overlap_group(with_logps=True), beta=0.04)
        assert config.beta == 0.04
        assert config.assume_unit_ratio

    def test_ratio_enabled_when_requested_and_present(self):
        config = effective_config(
            make_overlap_group(with_logps=True), beta=0.04, assume_unit_ratio=False
        )
        assert not config.assume_unit_ratio
