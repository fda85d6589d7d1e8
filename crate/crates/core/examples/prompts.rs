//! Existence and state prompts, and the hint-based refinement used on retry.

use detvlm::prompt::PromptTemplates;
use detvlm::{existence_prompt, optimize_prompt, state_prompt, ComponentSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let components = [
        ComponentSpec::new("sun_visor", "Sun visor")
            .with_states(["raised", "lowered"])
            .with_spatial_hint("top-left corner"),
        ComponentSpec::new("rear_seat", "Rear seat")
            .with_states(["occluded", "clear"])
            .with_feature_hint("rear bench seat behind the driver"),
        ComponentSpec::new("chepai", "License plate"),
    ];
    for c in &components {
        let first = existence_prompt(c);
        let retry = optimize_prompt(&first, c);
        println!("{}", c.id);
        println!("  existence: {}", first.text);
        println!("  refined:   {} (hint {:?})", retry.text, retry.hint_used);
        if c.has_states() {
            println!("  state:     {}", state_prompt(c).text);
        }
    }

    let custom = PromptTemplates::from_reader(
        r#"{"existence": "Does the photo show a {display_name}? Yes or No."}"#.as_bytes(),
    )?;
    println!("custom: {}", custom.existence(&components[2]).text);
    Ok(())
}
