from __future__ import annotations

import pytest

from verifiable_training.tamper_harness import (
    EXPECT_NO_DETECTION,
    DetectionResult,
    Scenario,
    format_matrix,
    main,
)


@pytest.mark.parametrize("scenario", list(Scenario), ids=lambda s: s.value)
def test_scenario(harness, scenario):
    result = harness.run_scenario(scenario, repetitions=2)
    assert result.trials > 0
    assert result.ok, result.details
    assert result.detected is (scenario not in EXPECT_NO_DETECTION)


def test_result_bookkeeping():
    r = DetectionResult(Scenario.LINK_SWAP)
    assert not r.ok  # no trials yet
    r.record(True, "caught")
    r.record(False, "missed")
    assert (r.trials, r.detections, r.details) == (2, 1, ["missed"])
    assert not r.ok


def test_silent_scenario_with_alarm_fails():
    r = DetectionResult(Scenario.NOOP)
    r.record(True, "false positive")
    assert not r.ok and r.details == ["false positive"]


def test_matrix_lists_every_scenario():
    rows = [DetectionResult(s, trials=1, detections=int(s not in EXPECT_NO_DETECTION)) for s in Scenario]
    text = format_matrix(rows)
    assert all(s.value in text for s in Scenario)
    assert "FAIL" not in text


def test_main_prints_matrix(capsys):
    assert main(["--repetitions", "1"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == len(Scenario)
