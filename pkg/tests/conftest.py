import shlex

import numpy as np
import pytest

from voiprelay.audio_io import AudioClip, write_wav
from voiprelay.orchestrator import SimulationContext
from voiprelay.provision import Quotas
from voiprelay.simconfig import parse_simulation_args

SIMULATE_ARGV = shlex.split(
    "--sreg ap-northeast-2 --rreg ap-northeast-3 --sins t2.micro --rins t2.micro "
    "--sami ami-0c9c942bd7bf113a2 --rami ami-0da13880f921c96a5 --src test_src_noisy "
    "--dur 16 --subw 100 --sdbw 100 --rubw 100 --rdbw 100 --s3 s3://raw-src-files/src_noisy_test/")

SIMULATE_AMI_ARGV = shlex.split(
    "--sreg us-east-1 --rreg us-east-1 --sins t2.micro --rins t2.micro "
    "--sami ami-0f2b6f057e0b94d5f --rami ami-0f2b6f057e0b94d5f --src test_src_noisy "
    "--dur 1655 --subw 100 --sdbw 100 --rubw 100 --rdbw 100 --s3 s3://raw-src-files/src_noisy_test_4/")

DYNAMIC_MIX_ARGV = shlex.split(
    "--src_dir src_noisy --relay_dir src_noisy --clean_dir src_clean --num 100")


def tone(freq, seconds, rate=16000, amp=10000.0):
    t = np.arange(int(round(seconds * rate))) / rate
    return np.round(amp * np.sin(2 * np.pi * freq * t)).astype(np.int16)


def write_tone_corpus(root, label, seconds, n_files=1, rate=16000):
    d = root / label
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_files):
        p = d / f"clip_{i:03d}.wav"
        write_wav(AudioClip(tone(200 + 50 * i, seconds, rate), rate, 1), p)
        paths.append(p)
    return paths


def make_config(kbps=10_000, dur=16, src="tones", seed=0, **kw):
    argv = ["--sreg", "us-east-1", "--rreg", "us-east-1", "--sins", "t2.micro",
            "--rins", "t2.micro", "--sami", "ami-a", "--rami", "ami-b", "--src", src,
            "--dur", str(dur), "--subw", str(kbps), "--sdbw", str(kbps), "--rubw", str(kbps),
            "--rdbw", str(kbps), "--s3", "s3://bucket/out/", "--seed", str(seed)]
    for flag, value in kw.items():
        argv += [f"--{flag}", str(value)]
    return parse_simulation_args(argv)


@pytest.fixture
def context(tmp_path):
    return SimulationContext.create(tmp_path / "run", corpus_root=tmp_path / "corpus")


@pytest.fixture
def make_context(tmp_path):
    def make(name="run", quotas=None, faults=None, seed=0, **kw):
        return SimulationContext.create(tmp_path / name, corpus_root=tmp_path / "corpus",
                                        quotas=quotas or Quotas(), faults=faults, seed=seed, **kw)
    return make


# acceptance reporting: one PASS/FAIL line per criterion ---------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when == "teardown" or report.skipped:
        return
    number, title = mark.args
    if report.when == "call" or report.failed:
        _criteria[number] = (title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"{status}  criterion {number:2d}: {title}")
