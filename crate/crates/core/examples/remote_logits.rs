//! Serve a trained model over HTTP and drive watermarked generation through
//! the remote client.
//!
//!     cargo run --release --example remote_logits

use std::sync::Arc;
use std::thread;

use inkmark::bundled::bundled;
use inkmark::lm::{handle_logits_request, RemoteConfig, RemoteLogits, VOCAB_HASH_HEADER};
use inkmark::watermark::{watermarked_generate, GenerateOptions};
use inkmark::{LogitSource, WatermarkSpec, Watermarker};

fn main() -> inkmark::Result<()> {
    let bundle = bundled();
    let model = Arc::new(bundle.train(3)?);
    let vocab = model.vocab().clone();
    let hash = vocab.hash();

    let server = tiny_http::Server::http("127.0.0.1:0").expect("bind");
    let addr = server.server_addr().to_ip().expect("tcp address");
    let served = Arc::clone(&model);
    thread::spawn(move || {
        for mut req in server.incoming_requests() {
            let mut body = String::new();
            let _ = req.as_reader().read_to_string(&mut body);
            let client_hash = req
                .headers()
                .iter()
                .find(|h| h.field.equiv(VOCAB_HASH_HEADER))
                .map(|h| h.value.as_str().to_string());
            let (code, text) = handle_logits_request(served.as_ref(), &hash, client_hash.as_deref(), &body);
            let header = tiny_http::Header::from_bytes(VOCAB_HASH_HEADER, hash.as_bytes()).expect("header");
            let _ = req.respond(
                tiny_http::Response::from_string(text)
                    .with_status_code(code)
                    .with_header(header),
            );
        }
    });

    let remote = RemoteLogits::new(&format!("http://{addr}"), &vocab, RemoteConfig::default());
    let wm = Watermarker::new(WatermarkSpec::sir(2.0, 5)?, remote.vocab_size())?;
    let prompt = vocab.encode_prompt("the old fox");
    let opts = GenerateOptions::greedy(20);
    let local = watermarked_generate(model.as_ref(), Some(&wm), &prompt, &opts)?;
    let over_http = watermarked_generate(&remote, Some(&wm), &prompt, &opts)?;
    println!("local:  {}", vocab.detokenize(local.output()));
    println!("remote: {}", vocab.detokenize(over_http.output()));
    assert_eq!(local.tokens, over_http.tokens);
    Ok(())
}
