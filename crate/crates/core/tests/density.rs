mod checks;

#[test]
fn flow_matches_a_known_mixture() {
    let detail = checks::density_quality().unwrap();
    println!("{detail}");
}
