//! The JSON request handlers behind `salad serve`, called directly.

mod common;

use salad::service::Service;
use salad::toyworld::Family;

fn main() -> salad::Result<()> {
    let toy = common::train_toy(Family::Chair, common::steps_arg(500), 16)?;
    let service = Service::new(toy.phase1, toy.phase2, toy.sched, Family::Chair)?;
    let show = |method: &str, path: &str, body: &str| {
        let r = service.handle(method, path, body.as_bytes());
        let text = if r.body.len() > 160 { format!("{}...", &r.body[..160]) } else { r.body.clone() };
        println!("{method} {path} -> {} {text}", r.status);
        r
    };
    show("GET", "/health", "");
    let generated = show("POST", "/generate", r#"{"n": 1, "seed": 3, "text": "a chair with a tall back", "w": 2.0}"#);
    let shape = serde_json::from_str::<serde_json::Value>(&generated.body)?["shapes"][0].clone();
    show("POST", "/labels", &serde_json::json!({ "shape": shape }).to_string());
    show("POST", "/complete", &serde_json::json!({ "shape": shape, "text": "four thin legs", "seed": 1 }).to_string());
    show("POST", "/mix", &serde_json::json!({ "shape_a": shape, "shape_b": shape, "label": "back", "seed": 2 }).to_string());
    show("POST", "/decode", &serde_json::json!({ "shape": shape, "grid": 64 }).to_string());
    show("POST", "/generate", r#"{"n": 0, "seed": 1}"#);
    Ok(())
}
