"""Shared builders for the test files; plain functions so the script runners can use them too."""

import os
import sys

import numpy as np

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from jumpex.levy_model import ConstantCoefficients, Damping, JumpSpec, MarketModel  # noqa: E402

CANONICAL_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs", "canonical.toml")

# closed forms of the canonical config
SIGMA = 0.05
RATE = 1.8
W_HAT = 1.0 + 0.4 / (1.0 - np.exp(-1.8))


def canonical_model(jumps: bool = True) -> MarketModel:
    spec = JumpSpec(intensity=1.0, law="atoms", atoms=np.array([[0.1], [-0.1]]),
                    probabilities=np.array([0.5, 0.5]), dimension=1)
    if not jumps:
        spec = spec.without_jumps()
    return MarketModel(ConstantCoefficients([0.3], [[0.2]], [[1.0]]), spec, Damping(0.5), horizon=1.0)


def run_script_tests(title: str, tests) -> bool:
    """Runner used when a test file is executed directly"""
    print(f"🧪 {title}")
    print("=" * 60)
    results = []
    for test_func in tests:
        print(f"\n🔍 Running {test_func.__name__}...")
        try:
            test_func()
            results.append((test_func.__name__, True))
        except Exception as e:
            print(f"❌ {test_func.__name__} failed: {e!r}")
            results.append((test_func.__name__, False))

    print("\n" + "=" * 60)
    print("📊 TEST SUMMARY")
    print("=" * 60)
    passed = 0
    for name, result in results:
        status = "✅ PASS" if result else "❌ FAIL"
        print(f"{status:<8} {name}")
        passed += int(result)
    print(f"\nTests passed: {passed}/{len(results)}")
    return passed == len(results)
