use std::path::PathBuf;

use blemish_cli::config::RunConfig;

#[test]
fn run_config_seeds_parse_and_mutations_never_panic() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/run_config");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
        RunConfig::parse(&text).unwrap();
        for cut in 0..text.len() {
            if text.is_char_boundary(cut) {
                let _ = RunConfig::parse(&text[..cut]);
            }
        }
        for (i, _) in text.char_indices() {
            let mut m = text.clone();
            m.replace_range(i..i + 1, "=");
            let _ = RunConfig::parse(&m);
        }
        seen += 1;
    }
    assert!(seen >= 2);
}
