"""Shared runner for the scenario test scripts."""
import logging
import traceback
from typing import Callable, Iterable

logger = logging.getLogger(__name__)


def collect_tests(namespace: dict) -> list:
    """test_* functions in definition order."""
    return [fn for name, fn in namespace.items() if name.startswith("test_") and callable(fn)]


def run_suite(title: str, tests: Iterable[Callable]) -> int:
    """Run each test, print a PASS/FAIL summary and return an exit code."""
    logging.basicConfig(
        level=logging.WARNING,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    print(f"\n{'=' * 100}")
    print(title)
    print(f"{'=' * 100}\n")

    results = []
    for test in tests:
        try:
            test()
            results.append({"test_name": test.__name__, "success": True})
        except Exception as e:
            results.append({"test_name": test.__name__, "success": False, "error": f"{type(e).__name__}: {e}"})
            logger.debug(traceback.format_exc())

    passed = sum(1 for r in results if r["success"])
    print(f"Total Tests: {len(results)}")
    print(f"Passed: {passed}")
    print(f"Failed: {len(results) - passed}\n")
    for result in results:
        status = "✓ PASS" if result["success"] else "✗ FAIL"
        print(f"  {status} - {result['test_name']}")
        if not result["success"]:
            print(f"          Error: {result['error']}")
    print(f"\n{'=' * 100}\n")
    return 0 if passed == len(results) else 1
