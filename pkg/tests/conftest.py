import os
import sys

sys.path.insert(0, os.path.dirname(__file__))
os.environ.pop("AGENTSIM_THREADS", None)
os.environ.pop("AGENTSIM_DOMAINS", None)

from hypothesis import settings

# first examples pay numba compilation
settings.register_profile("agentsim", deadline=None)
settings.load_profile("agentsim")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
