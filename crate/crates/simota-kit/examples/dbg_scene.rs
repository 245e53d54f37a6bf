use simota_kit::config::{load_scene, save_scene};
use simota_kit::synthfit::make_scene;

fn main() {
    let dir = std::env::temp_dir().join("dbg_scene");
    std::fs::create_dir_all(&dir).unwrap();
    let scene = make_scene(9, 4, 64, 3);
    let path = dir.join("scene.json");
    save_scene(&scene, &path).unwrap();
    let back = load_scene(&path).unwrap();
    if back.id != scene.id { println!("id differs"); }
    if back.image != scene.image { println!("image differs"); }
    if back.gts != scene.gts {
        for (a, b) in scene.gts.iter().zip(&back.gts) {
            if a != b { println!("gt differs:\n  {a:?}\n  {b:?}"); }
        }
        if back.gts.len() != scene.gts.len() { println!("gt count {} vs {}", scene.gts.len(), back.gts.len()); }
    }
    println!("json:\n{}", std::fs::read_to_string(&path).unwrap());
}
