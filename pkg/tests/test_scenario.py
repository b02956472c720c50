"""End-to-end runs driven by scenario files, and the file format itself."""

import json
from pathlib import Path

import pytest

from cfaudit.scenario import (ScenarioError, measure_attack_window,
                              parse_scenario, resolve_input, run,
                              run_scenario)

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"
PROGRAM_DIR = SCENARIO_DIR / "programs"


def write_scn(tmp_path, body, program="main:\n    nsc_call\n"):
    prog = tmp_path / "prog.asm"
    prog.write_text(program)
    scn = tmp_path / "case.scn"
    scn.write_text(body)
    return scn


# -- parsing ---------------------------------------------------------------

def test_parse_reads_every_knob(tmp_path):
    scn = write_scn(tmp_path, """
[scenario]
name = full
program = prog.asm
delta = 1234
log_max = 64
policy = freeze
app_id = 7
max_ticks = 9999
resend_interval = 50

[channel]
loss = 0.25
duplicate = 0.5
delay_min = 1
delay_max = 6
seed = 42

[input]
words = 3 0x10 @main

[attack]
pmem_flip = 2
pmem_flip_mask = 0x80
reset_at = 100

[verifier]
heal_on_mac_mismatch = false
resend_interval = 77
initial_chal = 5

[expect]
settled = true
""")
    spec = parse_scenario(scn)
    assert spec.name == "full"
    assert spec.delta == 1234
    assert spec.log_max == 64
    assert spec.app_id == 7
    assert spec.max_ticks == 9999
    assert spec.device_resend == 50
    assert spec.channel.loss == 0.25
    assert spec.channel.duplicate == 0.5
    assert spec.channel.delay_min == 1
    assert spec.channel.delay_max == 6
    assert spec.channel.seed == 42
    assert spec.input_tokens == ("3", "0x10", "@main")
    assert spec.pmem_flip == 2
    assert spec.pmem_flip_mask == 0x80
    assert spec.reset_at == 100
    assert spec.heal_on_mac_mismatch is False
    assert spec.verifier_resend == 77
    assert spec.initial_chal == 5
    assert spec.expect == {"settled": "true"}


def test_parse_defaults_fill_missing_sections(tmp_path):
    scn = write_scn(tmp_path, "[scenario]\nprogram = prog.asm\n")
    spec = parse_scenario(scn)
    assert spec.name == "case"
    assert spec.delta == 500_000
    assert spec.channel.loss == 0.0
    assert spec.input_tokens == ()
    assert spec.pmem_flip is None
    assert spec.reset_at is None
    assert spec.expect == {}


def test_parse_rejects_unknown_key(tmp_path):
    scn = write_scn(tmp_path,
                    "[scenario]\nprogram = prog.asm\nspeed = 9\n")
    with pytest.raises(ScenarioError, match="unknown key 'speed'"):
        parse_scenario(scn)


def test_parse_rejects_unknown_section(tmp_path):
    scn = write_scn(tmp_path,
                    "[scenario]\nprogram = prog.asm\n\n[extra]\nx = 1\n")
    with pytest.raises(ScenarioError, match=r"unknown section \[extra\]"):
        parse_scenario(scn)


def test_parse_rejects_unknown_expectation(tmp_path):
    scn = write_scn(tmp_path,
                    "[scenario]\nprogram = prog.asm\n\n[expect]\nvredict = end\n")
    with pytest.raises(ScenarioError, match="unknown key 'vredict'"):
        parse_scenario(scn)


def test_parse_requires_a_program(tmp_path):
    scn = tmp_path / "empty.scn"
    scn.write_text("[scenario]\nname = no_program\n")
    with pytest.raises(ScenarioError, match="must name a program"):
        parse_scenario(scn)


def test_parse_rejects_missing_program_file(tmp_path):
    scn = tmp_path / "gone.scn"
    scn.write_text("[scenario]\nprogram = nowhere.asm\n")
    with pytest.raises(ScenarioError, match="cannot read program"):
        parse_scenario(scn)


def test_parse_rejects_unknown_policy(tmp_path):
    scn = write_scn(tmp_path,
                    "[scenario]\nprogram = prog.asm\npolicy = shred\n")
    with pytest.raises(ScenarioError, match="unknown policy 'shred'"):
        parse_scenario(scn)


def test_resolve_input_maps_labels_and_numbers():
    words = resolve_input(("7", "0x10", "@stop"), {"stop": 0x1040})
    assert words == [7, 16, 0x1040]


def test_resolve_input_rejects_unknown_label():
    with pytest.raises(ScenarioError, match="unknown label 'ghost'"):
        resolve_input(("@ghost",), {"main": 0x1000})


def test_pmem_flip_outside_image_is_an_error(tmp_path):
    scn = write_scn(tmp_path, """
[scenario]
program = prog.asm

[attack]
pmem_flip = 100000
""")
    with pytest.raises(ScenarioError, match="outside the image"):
        run(parse_scenario(scn))


# -- the shipped scenario corpus -------------------------------------------

@pytest.mark.parametrize("name", sorted(p.name for p in SCENARIO_DIR.glob("*.scn")))
def test_shipped_scenario_meets_its_expectations(name):
    res = run_scenario(SCENARIO_DIR / name)
    assert res.settled, f"{name} never settled"
    assert res.ok, f"{name}: {res.failures}"


def test_benign_scenario_accounting_balances():
    res = run_scenario(SCENARIO_DIR / "benign_pulse.scn")
    # a perfect link carries every send to the auditor, exactly once
    assert res.reports_transmitted == res.reports_received == res.slices_audited
    assert res.log_bytes == 4 * res.destinations_seen
    assert res.post_heal_ns is None
    assert res.max_window == max(res.windows)
    assert res.max_window > 0


def test_hijack_scenario_details():
    res = run_scenario(SCENARIO_DIR / "overflow_hijack.scn")
    assert res.verdicts == ["heal", "end"]
    assert res.violation == "ShadowStackMismatch"
    assert res.violation_index == 6
    assert res.pmem_zeroed
    # parked for the verdict when the heal order landed, and remediation
    # never hands the core back: not one app instruction after the heal
    assert res.post_heal_ns == 0
    # the closing report authenticated under the post-remediation digest
    assert res.final_digest != ""


def test_power_cut_scenario_runs_nothing_after_reset():
    res = run_scenario(SCENARIO_DIR / "power_cut.scn")
    assert res.post_reset_ns == 0
    assert res.remnant_reports == 1
    assert res.verdict == "exec"


def test_lossy_scenario_shows_channel_damage():
    res = run_scenario(SCENARIO_DIR / "lossy_fold.scn")
    dropped = (res.channel_stats["to_device"]["dropped"]
               + res.channel_stats["to_verifier"]["dropped"])
    assert dropped > 0
    assert res.retransmissions >= 1
    assert res.slices_audited >= 2
    assert res.verdict == "end"


def test_runs_are_deterministic():
    spec = parse_scenario(SCENARIO_DIR / "lossy_fold.scn")
    first = run(spec).to_json()
    second = run(spec).to_json()
    assert first == second
    json.loads(first)  # and the report is valid JSON


def test_expectation_failures_are_reported_not_raised(tmp_path):
    scn = write_scn(tmp_path, """
[scenario]
program = prog.asm

[expect]
verdict = heal
""")
    res = run(parse_scenario(scn))
    assert res.settled
    assert not res.ok
    assert res.failures == ["verdict: wanted heal, got end"]


# -- attack window measurement ----------------------------------------------

def probe(name):
    return (PROGRAM_DIR / f"{name}.asm").read_text()


def test_window_grows_with_log_capacity():
    text = probe("window_dense")
    maxima = [measure_attack_window(text, log_max=cap, delta=10_000_000).max_window
              for cap in (1024, 2048, 4096)]
    assert maxima == sorted(maxima)
    assert maxima[0] < maxima[-1]


def test_window_is_capped_by_the_deadline():
    wm = measure_attack_window(probe("window_sparse"), log_max=16384, delta=1500)
    assert wm.max_window == 1500
    assert wm.triggers["deadline"] > 0


def test_halving_branch_density_doubles_the_window():
    dense = measure_attack_window(probe("window_dense"), log_max=2048,
                                  delta=10_000_000).max_window
    mid = measure_attack_window(probe("window_mid"), log_max=2048,
                                delta=10_000_000).max_window
    sparse = measure_attack_window(probe("window_sparse"), log_max=2048,
                                   delta=10_000_000).max_window
    assert 1.5 <= mid / dense <= 2.5
    assert 1.5 <= sparse / mid <= 2.5
