import pytest

_NAMES = {
    1: "W_{-1} bandwidth solver vs bisection oracle",
    2: "subset-mean variance identity",
    3: "threshold (prefix) structure of the online scheduler",
    4: "virtual-queue time-average delay",
    5: "learning-ordering trend across policies",
    6: "convergence-bound machinery",
    7: "gradient correctness and decomposition inequality",
    8: "delay-budget sweep trends and scheduler latency",
}
_results: dict[int, list[tuple[str, str, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = "; ".join(str(v) for k, v in rep.user_properties if k == "detail")
        _results.setdefault(mark.args[0], []).append((item.name, rep.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_results):
        runs = _results[n]
        verdict = "PASS" if all(o == "passed" for _, o, _ in runs) else "FAIL"
        details = " | ".join(f"{name}: {o}" + (f" ({d})" if d else "") for name, o, d in runs)
        tr.write_line(f"criterion {n} {verdict}: {_NAMES.get(n, '')} :: {details}")
