#[test]
fn wip() {}
