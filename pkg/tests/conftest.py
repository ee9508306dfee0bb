from dataclasses import replace

import pytest

from userlibri.experiment import ExperimentConfig, PipelineConfig
from userlibri.synthetic import SyntheticConfig, generate

SMALL_SYNTH = SyntheticConfig(seed=5, users_per_split=3, utterances_per_user=12, lm_sentences_per_user=400,
                              general_sentences=3000, general_vocab=600, global_phrases=300)
SMALL_PIPELINE = replace(PipelineConfig(), vocab_size=300, limited_sizes=(50, 100, 200), resamples=200)

# acceptance criteria append (number, status, detail) here; printed in the terminal summary
ACCEPTANCE_LINES: list[tuple[int, str, str]] = []


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    return generate(tmp_path_factory.mktemp("small"), SMALL_SYNTH).root


@pytest.fixture
def small_config():
    return ExperimentConfig(5, SMALL_PIPELINE)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")
