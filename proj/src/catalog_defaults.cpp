#include "studentsim/profile.hpp"

namespace studentsim {

namespace {

AttributeCatalog make_default_catalog() {
  AttributeCatalog c;
  c.genders = {"female", "male"};
  c.age_min = 17;
  c.age_max = 28;
  c.majors = {
      // Science
      "Mathematics", "Statistics", "Physics", "Chemistry", "Biology",
      "Biochemistry", "Geology", "Astronomy", "Environmental Science",
      "Neuroscience", "Ecology", "Oceanography", "Materials Science",
      "Data Science",
      // Engineering
      "Computer Science", "Software Engineering", "Electrical Engineering",
      "Mechanical Engineering", "Civil Engineering", "Chemical Engineering",
      "Aerospace Engineering", "Biomedical Engineering",
      "Industrial Engineering", "Automation", "Architecture",
      "Nuclear Engineering", "Environmental Engineering",
      "Information Security", "Artificial Intelligence",
      // Social science and professional
      "Economics", "Finance", "Accounting", "Business Administration",
      "Marketing", "Management Science", "Psychology", "Sociology",
      "Political Science", "International Relations", "Law", "Education",
      "Journalism", "Communication", "Anthropology", "Public Administration",
      "Social Work", "Geography", "Public Health", "Medicine", "Nursing",
      "Pharmacy",
      // Arts and humanities
      "History", "Philosophy", "English Literature", "Chinese Literature",
      "Linguistics", "Foreign Languages", "Fine Arts", "Music", "Film Studies",
      "Design", "Theater"};
  c.standings = {"freshman",
                 "sophomore",
                 "junior",
                 "senior",
                 "first-year master",
                 "second-year master",
                 "third-year master"};
  c.mbti_types = {"ISTJ", "ISFJ", "INFJ", "INTJ", "ISTP", "ISFP", "INFP", "INTP",
                  "ESTP", "ESFP", "ENFP", "ENTP", "ESTJ", "ESFJ", "ENFJ", "ENTJ"};

  c.big_five = {{
      {'O', "Openness",
       {"Curious about new ideas and enjoys exploring unfamiliar topics.",
        "Imaginative and open to unconventional ways of learning."},
       {"Prefers familiar routines and concrete, practical material.",
        "Skeptical of abstract ideas and sticks to proven methods."}},
      {'C', "Conscientiousness",
       {"Organized and plans study time carefully.",
        "Self-disciplined and follows through on commitments."},
       {"Easily distracted from learning tasks and often procrastinates.",
        "Struggles to keep schedules and misses small deadlines."}},
      {'E', "Extraversion",
       {"Energized by group work and speaks up readily in class.",
        "Outgoing and seeks out social study settings."},
       {"Prefers studying alone and rarely speaks up in class.",
        "Reserved and finds large group discussions draining."}},
      {'A', "Agreeableness",
       {"Cooperative and considerate toward classmates.",
        "Trusting and eager to help peers."},
       {"Critical of others and prefers to work independently.",
        "Competitive and slow to accept other people's suggestions."}},
      {'N', "Neuroticism",
       {"Frequently anxious about grades and sensitive to criticism.",
        "Mood swings easily under academic pressure."},
       {"Emotionally steady and calm under exam pressure.",
        "Rarely worries and recovers quickly from setbacks."}},
  }};

  c.learning_traits = {{
      {"Goal commitment",
       {"I am committed to the academic goals I set for myself.",
        "I keep working toward my study goals even when it gets hard.",
        "Reaching my academic goals matters a lot to me."}},
      {"Motivation",
       {"I am motivated to learn the material in my courses.",
        "I find my coursework interesting and worth the effort.",
        "I look forward to studying for my classes."}},
      {"Self-efficacy",
       {"I am confident I can master the skills taught in my courses.",
        "I believe I can do well on exams if I prepare.",
        "I can figure out difficult assignments on my own."}},
      {"Self-regulation",
       {"I plan my study sessions in advance.",
        "I monitor my progress and adjust how I study.",
        "I can keep myself focused when studying."}},
  }};

  c.challenge_items = {
      "Do you find it hard to understand course materials?",
      "Do you have trouble taking tests or completing assignments?",
      "Are you easily distracted in class?",
      "Do you lack effective learning strategies or study plans?",
      "Do you hesitate to seek help from teachers or classmates?",
      "Do you often feel stressed or anxious about your studies?",
      "Do you struggle to manage your study time?"};
  c.d_max = 1;
  return c;
}

}  // namespace

const AttributeCatalog& default_catalog() {
  static const AttributeCatalog catalog = make_default_catalog();
  return catalog;
}

}  // namespace studentsim
