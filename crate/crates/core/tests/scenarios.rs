use std::path::Path;

use stlmpc::formula::Mode;
use stlmpc::robustness::K1Choice;
use stlmpc::scenario::{NoiseSpec, Scenario};

fn bundled(name: &str) -> Scenario {
    Scenario::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)).unwrap()
}

#[test]
fn case_study_resolves_to_step_intervals() {
    let r = bundled("casestudy.toml").resolve().unwrap();
    assert_eq!(r.spec.mode, Mode::OneTime { trigger: 0 });
    assert_eq!(r.spec.length(), 50);
    assert_eq!(
        r.spec.body.to_string(),
        "F[10,50] (p1 & p2 & p7 & p8) & F[10,50] (p3 & p4 & p7 & p8) & F[10,50] (p3 & p4 & p5 & p6) & G[0,50] (p1 & p4 & p5 & p8)"
    );
    assert_eq!(r.k1.get(0), Some(&K1Choice::Offset(24)));
    assert_eq!(r.k1.get(1), Some(&K1Choice::Offset(50)));
    assert_eq!(r.k1.get(2), Some(&K1Choice::Offset(39)));
    assert_eq!(r.config.horizon, 50);
    assert_eq!(r.x0, vec![0.1, 0.0, 0.1, 0.0]);
    assert!(matches!(r.noise, NoiseSpec::Fixed(_, _)));
    assert_eq!(r.predicates.labels()[6], "py >= 8");
}

#[test]
fn bundled_scenarios_round_trip() {
    for name in ["casestudy.toml", "worked_example.toml"] {
        let sc = bundled(name);
        let norm = sc.normalized().unwrap();
        let back = Scenario::from_toml_str(&norm.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, norm, "{name}");
        assert_eq!(back.normalized().unwrap(), norm, "{name}");
        let (a, b) = (sc.resolve().unwrap(), back.resolve().unwrap());
        assert_eq!(a.spec, b.spec);
        assert_eq!(a.k1, b.k1);
        assert_eq!(a.config, b.config);
        assert_eq!(a.predicates, b.predicates);
    }
}
