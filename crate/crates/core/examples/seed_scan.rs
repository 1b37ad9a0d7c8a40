use vidmask::data::{make_dataset, parse_caption, Motion};

fn main() {
    for seed in 0..400u64 {
        let clips = make_dataset(8, seed, 2, 16, 16).unwrap();
        let motions: Vec<Motion> =
            clips.iter().map(|c| parse_caption(&c.caption).unwrap().motion).collect();
        let positional = motions
            .iter()
            .filter(|m| matches!(m, Motion::LeftToRight | Motion::TopToBottom))
            .count();
        let statics = motions.iter().filter(|m| matches!(m, Motion::Static)).count();
        if positional >= 7 && statics == 0 {
            println!("seed {seed}: positional {positional}, statics {statics}, motions {motions:?}");
        }
    }
}
