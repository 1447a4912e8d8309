"""Smoke test for the wbal Python extension.

Build and install first:  maturin develop -m crates/python/Cargo.toml
"""

import math

import wbal


def main():
    ds = wbal.Dataset.example(seed=11, n_per_group=400)
    assert ds.n_rows == 800 and len(ds) == 800
    assert "treat" in ds.column_names

    round_trip = wbal.Dataset.from_csv(ds.to_csv())
    assert round_trip.n_rows == ds.n_rows

    request = {
        "spec": wbal.example_spec("ATT"),
        "trims": [{"confounder": "satl_0", "upper_cut": 100.0}],
        "engine": {"gbm": {"max_trees": 500}},
        "sensitivity": {
            "grid": {"es_min": 0.0, "es_max": 0.3, "es_points": 2,
                     "rho_min": 0.0, "rho_max": 0.3, "rho_points": 2},
            "draws": 3,
            "seed": 5,
        },
    }
    a = wbal.run_analysis(ds, request)
    print(a)
    assert a.chosen == a.recommended
    assert math.isfinite(a.effect)
    assert abs(a.effect - a.effect_table()["effect"]) < 1e-12
    assert len(a.weights()) == a.n_analysed

    balance = a.balance()
    assert balance["columns"][0] == "Unweighted"
    assert "Estimated treatment effect" in a.report_html()
    assert a.export_csv().splitlines()[0].endswith("EB3")
    assert len(a.sensitivity()["effect_surface"]) == 4

    again = wbal.run_analysis(ds, request)
    assert again.effect == a.effect and again.report_html() == a.report_html()

    assert wbal.ess([1.0] * 10) == 10.0
    assert wbal.weighted_ks([0.0, 1.0], [True, False], [1.0, 1.0]) == 1.0
    assert len(wbal.algorithms()) == 9

    bad = dict(request, spec=dict(request["spec"], outcome="nope"))
    try:
        wbal.run_analysis(ds, bad)
    except wbal.WbalError as e:
        assert "outcome" in str(e)
    else:
        raise AssertionError("expected WbalError")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
