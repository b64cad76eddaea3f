// Separate test binary: it mutates the process environment.

use vb_score::tagger::{RemoteTagger, RemoteTaggerConfig, ENDPOINT_ENV};

#[test]
fn env_var_overrides_configured_endpoint() {
    std::env::set_var(ENDPOINT_ENV, "http://127.0.0.1:1234/override");
    let t = RemoteTagger::new(RemoteTaggerConfig::new("http://example.invalid/tag")).unwrap();
    assert_eq!(t.endpoint(), "http://127.0.0.1:1234/override");

    std::env::set_var(ENDPOINT_ENV, "");
    let t = RemoteTagger::new(RemoteTaggerConfig::new("http://example.invalid/tag")).unwrap();
    assert_eq!(t.endpoint(), "http://example.invalid/tag");

    std::env::remove_var(ENDPOINT_ENV);
    let t = RemoteTagger::new(RemoteTaggerConfig::new("http://example.invalid/tag")).unwrap();
    assert_eq!(t.endpoint(), "http://example.invalid/tag");
}
