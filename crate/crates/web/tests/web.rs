use moece_web::{dispatch_json, edits_json, parse_gates, random_gates_text, score_json};
use serde_json::Value;

fn json(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn gate_rows_are_normalized_and_validated() {
    let g = parse_gates("2 2\n1, 3 ; 0 5").unwrap();
    assert_eq!(g.shape(), &[3, 2]);
    assert_eq!(g.data(), &[0.5, 0.5, 0.25, 0.75, 0.0, 1.0]);
    assert!(parse_gates("1 2\n3").is_err());
    assert!(parse_gates("1 x").is_err());
    assert!(parse_gates("0 0").is_err());
    assert!(parse_gates("-1 2").is_err());
    assert!(parse_gates("1").is_err());
}

#[test]
fn switch_dispatch_respects_capacity() {
    // Four tokens all prefer expert 0; capacity ceil(1.0 * 4 / 2) = 2.
    let v = json(dispatch_json("0.9 0.1\n0.8 0.2\n0.7 0.3\n0.6 0.4", "switch", 1.0, "sample", 0).unwrap());
    assert_eq!(v["capacity"], 2);
    assert_eq!(v["load"], serde_json::json!([2, 0]));
    assert_eq!(v["dropped_tokens"], 2);
    assert_eq!(v["choices"][2][0]["overflow"], true);
    let free = json(dispatch_json("0.9 0.1\n0.8 0.2", "switch", 0.0, "sample", 0).unwrap());
    assert!(free["capacity"].is_null());
}

#[test]
fn uniform_and_one_hot_balance_values() {
    let hot = json(dispatch_json("1 0 0\n1 0 0\n1 0 0", "gshard", 0.0, "always", 0).unwrap());
    assert!((hot["balance_loss"].as_f64().unwrap() - 3.0).abs() < 1e-9);
    let flat = json(dispatch_json("1 0\n0 1", "switch", 0.0, "sample", 0).unwrap());
    assert!((flat["balance_loss"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!(dispatch_json("1 0", "expert-choice", 0.0, "sample", 0).is_err());
}

#[test]
fn random_gates_parse_back() {
    let t = random_gates_text(5, 4, 3.0, 9);
    assert_eq!(t, random_gates_text(5, 4, 3.0, 9));
    assert_eq!(parse_gates(&t).unwrap().shape(), &[5, 4]);
}

#[test]
fn edit_extraction_matches_the_worked_example() {
    let v = json(
        edits_json(
            "The rich people will buy a car but the poor people will not .",
            "Rich people will buy a car , but poor people will not .",
        )
        .unwrap(),
    );
    assert_eq!(v["round_trip"], true);
    let e = v["edits"].as_array().unwrap();
    assert_eq!(e.len(), 3);
    assert!(serde_json::to_string(&e[1]).unwrap().contains("PUNCT"));
}

#[test]
fn sentence_scoring() {
    let src = "he go to the school";
    let v = json(score_json(src, "he goes to the school", "he goes to school").unwrap());
    assert_eq!((v["tp"].as_u64(), v["fp"].as_u64(), v["fn_"].as_u64()), (Some(1), Some(0), Some(1)));
    let same = json(score_json(src, "he goes to school", "he goes to school").unwrap());
    assert_eq!(same["f05"], 1.0);
}
