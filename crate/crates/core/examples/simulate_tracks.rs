//! Renders a synthetic sequence, writes it in the JSON-lines track format and
//! reads it back.

use stereo_slam::sim::{simulate, Shape, SimSpec, TrajectorySpec};
use stereo_slam::tracks::{read_tracks, write_tracks};

fn main() {
    let spec = SimSpec { trajectory: TrajectorySpec { shape: Shape::CircleLoop, length: 9.0, frames: 60 }, ..SimSpec::default() };
    let seq = simulate(&spec);
    println!("world: {} points, {} segments", seq.world.points.len(), seq.world.segments.len());

    let mut buffer = Vec::new();
    write_tracks(&mut buffer, &seq.frames).unwrap();
    let frames = read_tracks(buffer.as_slice(), &spec.camera).unwrap();
    assert_eq!(frames, seq.frames);

    let points: Vec<usize> = frames.iter().map(|f| f.points.len()).collect();
    let lines: Vec<usize> = frames.iter().map(|f| f.lines.len()).collect();
    println!("{} frames, {} bytes of tracks", frames.len(), buffer.len());
    println!("points per frame: {} to {}", points.iter().min().unwrap(), points.iter().max().unwrap());
    println!("lines per frame:  {} to {}", lines.iter().min().unwrap(), lines.iter().max().unwrap());
    println!("first record: {}", String::from_utf8_lossy(buffer.split(|b| *b == b'\n').next().unwrap()).chars().take(160).collect::<String>());
}
