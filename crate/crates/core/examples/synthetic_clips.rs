//! Renders a few synthetic clips and draws each frame's green channel.
//! The label glyph is white (all channels high); distractors are orange.

use nuta::train::{generate_split, DataConfig, Split};

fn main() -> nuta::Result<()> {
    let mut cfg = DataConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/data.cfg"))?;
    cfg.num_train = 3;
    let split = generate_split(&cfg, Split::Train, cfg.num_train)?;
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    for i in 0..split.len() {
        let clip = split.clip(i)?;
        println!("clip {i}: label {} informative {:?}", clip.label, clip.informative_frames);
        let px = clip.frames.data();
        for y in (0..h).step_by(2) {
            let mut line = String::new();
            for f in 0..t {
                for x in 0..w {
                    // green channel
                    let v = px[((t + f) * h + y) * w + x];
                    line.push(match v {
                        v if v > 0.8 => '#',
                        v if v > 0.4 => '+',
                        _ => '.',
                    });
                }
                line.push(' ');
            }
            println!("{line}");
        }
        println!();
    }
    Ok(())
}
