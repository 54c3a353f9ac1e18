import sys

import numpy as np
import requests

BASE = "http://127.0.0.1:8000"


def get_status():
    """Call /"""
    res = requests.get(f"{BASE}/")
    return res.json()


def send_augment(points, **options):
    """Call /augment"""
    res = requests.post(f"{BASE}/augment", json={"points": points, **options})
    return res.json()


def send_detect(points, k=8, seed=0):
    """Call /detect"""
    res = requests.post(f"{BASE}/detect", json={"points": points, "k": k, "seed": seed})
    return res.status_code, res.json()


def sphere(n=2048, seed=0):
    v = np.random.default_rng(seed).standard_normal((n, 3))
    return (v / np.linalg.norm(v, axis=1, keepdims=True)).tolist()


def start():
    print("\n==============================")
    print("      PointMend Tester")
    print("==============================\n")

    status = get_status()
    print("Status:", status)

    # ----------------------------------------------------
    # STEP 1: MAKE A DEFECT
    # ----------------------------------------------------
    normal = sphere()
    aug = send_augment(normal, ratio="1/32", scale=0.1, kind="bulge", seed=1)
    print(f"\nAugment: {aug['kind']} patch of {aug['patch_size']} points")

    if not status["checkpoint_loaded"]:
        print("\n⚠ No checkpoint loaded; skipping /detect")
        return 0

    # ----------------------------------------------------
    # STEP 2: SCORE NORMAL vs DEFECT
    # ----------------------------------------------------
    for name, cloud in (("normal", aug["target"]), ("defect", aug["anomalous"])):
        code, res = send_detect(cloud)
        if code != 200:
            print(f"\n❌ /detect failed for {name}: {res}")
            return 1
        print(f"{name:>7}: object score {res['object_score']:.6g}")
    return 0


if __name__ == "__main__":
    sys.exit(start())
