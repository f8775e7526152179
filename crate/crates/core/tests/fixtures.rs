//! Frozen files shared with the feature extractor. Regenerate with
//! `cargo test -p ndvr-core --test fixtures -- --ignored` only when the
//! formats change on purpose.

use std::path::PathBuf;

use ndvr::aggregation::{mac_pool, FeatureMap, MacConformance};
use ndvr::feature_store::{read_features, write_features, FrameFeature, VideoFeatures};

fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn tiny_video() -> VideoFeatures {
    let frames = (0..5u32)
        .map(|f| {
            let x = f as f32;
            FrameFeature::new(
                f,
                8.0,
                vec![0.25 * x, 1.0 - 0.125 * x, -0.5, 0.0625 * x * x],
                vec![vec![0.5 + 0.25 * x, 0.0], vec![x, 2.0 - x, 0.375]],
            )
        })
        .collect();
    VideoFeatures::new("tiny", 8.0, frames).unwrap()
}

fn conformance_map() -> FeatureMap {
    let (h, w, c) = (4, 5, 6);
    let data = (0..h * w * c)
        .map(|i| ((i * 37 + 11) % 101) as f32 / 50.0 - 1.0)
        .collect();
    FeatureMap::new(h, w, c, data).unwrap()
}

#[test]
#[ignore = "rewrites the frozen fixtures"]
fn regenerate_fixtures() {
    let dir = fixtures_dir();
    std::fs::create_dir_all(&dir).unwrap();
    let mut bytes = Vec::new();
    write_features(&tiny_video(), &mut bytes).unwrap();
    std::fs::write(dir.join("tiny.ndvf"), bytes).unwrap();

    let map = conformance_map();
    let fixture = MacConformance { expected: mac_pool(&map).unwrap(), input: map };
    let mut text = serde_json::to_string_pretty(&fixture).unwrap();
    text.push('\n');
    std::fs::write(dir.join("mac_conformance.json"), text).unwrap();
}

#[test]
fn tiny_ndvf_reserializes_byte_identically() {
    let bytes = std::fs::read(fixtures_dir().join("tiny.ndvf")).unwrap();
    let video = read_features(bytes.as_slice()).unwrap();
    assert_eq!(video.video_id, "tiny");
    assert_eq!(video.frames.len(), 5);
    assert_eq!(video, tiny_video());
    let mut again = Vec::new();
    write_features(&video, &mut again).unwrap();
    assert_eq!(again, bytes);
}

#[test]
fn mac_fixture_matches_pooling() {
    let text = std::fs::read_to_string(fixtures_dir().join("mac_conformance.json")).unwrap();
    let fixture: MacConformance = serde_json::from_str(&text).unwrap();
    assert_eq!(fixture.input, conformance_map());
    let pooled = mac_pool(&fixture.input).unwrap();
    assert_eq!(pooled.len(), fixture.expected.len());
    for (got, want) in pooled.iter().zip(&fixture.expected) {
        assert!((got - want).abs() <= 1e-5, "{got} vs {want}");
    }
}
