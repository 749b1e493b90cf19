use weatherocc::scenegen::{
    generate_dataset, generate_scene, read_scene_pack, render_scene, SceneConfig, WeatherFlags,
    WeatherMix,
};

fn low_intensity_points(weather: WeatherFlags, seed: u64) -> usize {
    let cfg = SceneConfig::default();
    let (scene, labels) = generate_scene(&cfg, weather, seed);
    let pack = render_scene(&cfg, &scene, &labels).unwrap();
    pack.points.iter().filter(|p| p[3] <= 0.2).count()
}

#[test]
fn rain_adds_low_intensity_returns() {
    let clear = WeatherFlags::default();
    let rainy = WeatherFlags {
        rainy: true,
        night: false,
    };
    let mut more = 0;
    let (mut total_clear, mut total_rainy) = (0, 0);
    for seed in 0..20 {
        let (c, r) = (
            low_intensity_points(clear, seed),
            low_intensity_points(rainy, seed),
        );
        more += (r > c) as usize;
        total_clear += c;
        total_rainy += r;
    }
    assert!(total_rainy > total_clear, "{total_rainy} vs {total_clear}");
    assert!(
        more >= 15,
        "rain raised the count in only {more} of 20 scenes"
    );
}

#[test]
fn same_layout_under_every_condition() {
    let cfg = SceneConfig::default();
    let (_, base) = generate_scene(&cfg, WeatherFlags::default(), 42);
    for w in WeatherFlags::ALL {
        let (_, labels) = generate_scene(&cfg, w, 42);
        assert_eq!(labels, base, "{}", w.label());
    }
}

#[test]
fn dataset_packs_match_the_manifest() {
    let dir = tempfile::TempDir::new().unwrap();
    let entries = generate_dataset(
        dir.path(),
        10,
        3,
        WeatherMix::default(),
        &SceneConfig::default(),
    )
    .unwrap();
    assert_eq!(entries.len(), 10);
    let rainy = entries.iter().filter(|e| e.weather.rainy).count();
    let night = entries.iter().filter(|e| e.weather.night).count();
    assert_eq!((rainy, night), (4, 4));
    for e in &entries {
        let pack = read_scene_pack(&dir.path().join(&e.path)).unwrap();
        assert_eq!(pack.weather, e.weather);
        assert!(pack.points.iter().all(|p| p.iter().all(|v| v.is_finite())));
    }
}
