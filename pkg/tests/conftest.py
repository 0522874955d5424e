import pytest

from eventrep.synth import GeneratorConfig, generate


@pytest.fixture(scope="session")
def small_cohort():
    """(admissions, ledger) for 120 subjects; shared because generation is the slow part."""
    return generate(GeneratorConfig(n_subjects=120, seed=11))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    key = tuple(mark.args)
    res = item.config._criteria.setdefault(key, [])
    if rep.failed or (rep.when == "call" and rep.skipped):
        res.append(item.name)
    elif rep.when == "call":
        res.append(None)


def pytest_terminal_summary(terminalreporter, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), res in sorted(crit.items()):
        failed = [r for r in res if r]
        status = "FAIL" if failed or not res else "PASS"
        extra = f"  ({', '.join(failed)})" if failed else ""
        terminalreporter.write_line(f"criterion {num:2d}  {status}  {title}{extra}")
