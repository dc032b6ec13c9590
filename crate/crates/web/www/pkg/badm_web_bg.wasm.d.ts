/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_dance_free: (a: number, b: number) => void;
export const blend_weights: (a: number, b: number) => [number, number, number, number];
export const dance_beat_alignment: (a: number, b: number) => [number, number, number];
export const dance_fps: (a: number) => number;
export const dance_frames: (a: number) => number;
export const dance_motion_beats: (a: number) => [number, number];
export const dance_music_beats: (a: number) => [number, number];
export const dance_new: (a: number, b: number, c: number) => [number, number, number];
export const dance_positions: (a: number) => [number, number];
export const parents: () => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
