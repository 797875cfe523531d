#!/usr/bin/env python3
"""
Installation Validation Script
Validates that the split-computing toolkit is properly set up and ready to run
"""
import sys
import os
import json
from pathlib import Path

ROOT = Path(__file__).resolve().parent


def test_python_version():
    """Test Python version compatibility"""
    print("🔍 Checking Python version...")
    version = sys.version_info
    if version < (3, 8):
        print(f"❌ Python {version.major}.{version.minor} detected. Python 3.8+ required.")
        return False
    print(f"✓ Python {version.major}.{version.minor}.{version.micro} (compatible)")
    return True


def test_required_packages():
    """Test that all required packages are installed"""
    print("\n🔍 Checking required packages...")

    required_packages = {
        'numpy': 'numpy',
        'dotenv': 'python-dotenv',
        'tqdm': 'tqdm',
        'pytest': 'pytest',
    }

    missing_packages = []
    for module, package in required_packages.items():
        try:
            __import__(module)
            print(f"✓ {package}")
        except ImportError:
            print(f"❌ {package}")
            missing_packages.append(package)

    if missing_packages:
        print(f"\n❌ Missing packages: {missing_packages}")
        print("💡 Run: pip install -r requirements.txt")
        return False

    return True


def test_bundled_configuration():
    """Test the bundled profile and graph spec load"""
    print("\n🔍 Checking bundled configuration...")

    try:
        from config.constants import DESK_GRAPH_FILE
        from cost_profiler import load_profile
        from tensor_core import NetworkGraph

        document = load_profile()
        print(f"✓ Reference profile: {len(document.device.partitions)} partitions, "
              f"networks {[n.name for n in document.networks.values()]}")

        with open(ROOT / 'config' / DESK_GRAPH_FILE, encoding='utf-8') as f:
            graph = NetworkGraph.from_spec(json.load(f))
        print(f"✓ Desk graph: {len(graph)} layers, {len(graph.partition_points)} partition points, "
              f"output {graph.output_shape}")
        return True

    except json.JSONDecodeError:
        print("❌ Desk graph spec is corrupted")
        return False
    except Exception as e:
        print(f"❌ Error reading bundled configuration: {e}")
        return False


def test_codec():
    """Test that the byte path and the straight-through path agree"""
    print("\n🔍 Testing codec...")

    try:
        import numpy as np
        from lossy_codec import decode_feature, encode_feature, reconstruct_feature

        feature = np.random.default_rng(0).normal(size=(7, 7, 3))
        encoded = encode_feature(feature, quality=20)
        if not np.array_equal(decode_feature(encoded.to_bytes()), reconstruct_feature(feature, quality=20)):
            print("❌ Decoded feature differs from the straight-through reconstruction")
            return False
        print(f"✓ Codec round trip consistent ({len(encoded)} bytes for a 7x7x3 feature)")
        return True

    except Exception as e:
        print(f"❌ Codec error: {e}")
        return False


def test_planner():
    """Test the planner picks the expected partition on the reference profile"""
    print("\n🔍 Testing planner...")

    try:
        from partition_planner import plan_partitions
        from cost_profiler import load_profile

        document = load_profile()
        for name in document.networks:
            for target in ('latency', 'energy'):
                plan = plan_partitions(document, name, target)
                if plan.chosen_label != 'RB1':
                    print(f"⚠️  {name} min-{target} chose {plan.chosen_label}, expected RB1")
                    return False
        print("✓ Reference profile plans select RB1 on every network")
        return True

    except Exception as e:
        print(f"❌ Planner error: {e}")
        return False


def test_protocol():
    """Test frame serialization"""
    print("\n🔍 Testing wire protocol...")

    try:
        from split_protocol import LoadReport, encode_frame, parse_frame

        message = LoadReport(1.5, 3)
        parsed, consumed = parse_frame(encode_frame(message))
        if parsed != message or consumed != len(encode_frame(message)):
            print("❌ LOAD_REPORT frame does not parse back")
            return False
        print("✓ Frames parse back to equal messages")
        return True

    except Exception as e:
        print(f"❌ Protocol error: {e}")
        return False


def test_environment_file():
    """Test optional .env settings"""
    print("\n🔍 Checking .env file...")

    env_path = Path('.env')
    if not env_path.exists():
        print("⚠️  .env file not found (defaults will be used)")
        return True

    print("✓ .env file exists")

    from dotenv import load_dotenv
    load_dotenv(env_path)

    timeout = os.getenv('BOTTLENET_TIMEOUT_MS')
    if timeout is not None and not timeout.isdigit():
        print(f"❌ BOTTLENET_TIMEOUT_MS must be a whole number of milliseconds, got {timeout!r}")
        return False
    server = os.getenv('BOTTLENET_SERVER')
    if server is not None and ':' not in server:
        print(f"❌ BOTTLENET_SERVER must be HOST:PORT, got {server!r}")
        return False

    return True


def main():
    """Run all validation tests"""
    print("🔍 BottleNet Installation Validation")
    print("=" * 50)

    sys.path.insert(0, str(ROOT))
    tests = [
        ("Python Version", test_python_version),
        ("Required Packages", test_required_packages),
        ("Environment File", test_environment_file),
        ("Bundled Configuration", test_bundled_configuration),
        ("Codec", test_codec),
        ("Planner", test_planner),
        ("Wire Protocol", test_protocol),
    ]

    passed = 0
    total = len(tests)
    issues = []

    for test_name, test_func in tests:
        print(f"\n{'=' * 20} {test_name} {'=' * (30 - len(test_name))}")

        try:
            if test_func():
                passed += 1
            else:
                issues.append(test_name)
        except Exception as e:
            print(f"❌ {test_name} failed with error: {e}")
            issues.append(test_name)

    print(f"\n{'=' * 50}")
    print("🎯 VALIDATION SUMMARY")
    print(f"{'=' * 50}")

    print(f"\n✓ Passed: {passed}/{total} tests")

    if passed == total:
        print("\n🎉 All validations passed! The toolkit is ready to use.")
        print("\n🚀 Next steps:")
        print("   1. Run: python bottlenet.py dataset --kind stripes --out data/stripes.bnds")
        print("   2. Run: python bottlenet.py sweep --data data/stripes.bnds --out runs/sweep")
        print("   3. Run: python bottlenet.py plan --sweep runs/sweep --out runs/plan.json")
        success = True
    else:
        print(f"\n❌ Failed tests: {issues}")
        print("\n🔧 Please fix the issues above before proceeding.")
        print("\nFor help:")
        print("   - Run: python bottlenet.py --help")
        print("   - Check docs/SPLIT_RUNTIME.md")
        success = False

    return success


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
